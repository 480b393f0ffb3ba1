"""MLM, residue contrastive (a2g / g2a), latent, structure-token and overall losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from .corpus import Batch
from .model import ModelBundle

FAMILIES = ("a2g", "g2a", "physical")


@dataclass(frozen=True)
class LossWeights:
    latent: float = 0.5
    physical: float = 0.5

    def __post_init__(self) -> None:
        if self.latent < 0 or self.physical < 0:
            raise ValueError("loss weights must be >= 0")
        if self.latent > 0 and self.physical > 0 and abs(self.latent + self.physical - 1.0) > 1e-12:
            raise ValueError(
                f"with both structural tasks enabled the weights must sum to 1, got {self.latent} + {self.physical}"
            )


@dataclass
class ResidueLossSet:
    a2g: torch.Tensor
    g2a: torch.Tensor
    physical: torch.Tensor
    batch_index: torch.Tensor
    residue_index: torch.Tensor

    def __post_init__(self) -> None:
        n = len(self.batch_index)
        for fam in FAMILIES:
            if len(getattr(self, fam)) != n:
                raise ValueError(f"{fam} has {len(getattr(self, fam))} values, expected {n}")

    def __len__(self) -> int:
        return len(self.batch_index)

    def family(self, name: str) -> torch.Tensor:
        return getattr(self, name)

    def detach(self) -> "ResidueLossSet":
        return ResidueLossSet(self.a2g.detach(), self.g2a.detach(), self.physical.detach(),
                              self.batch_index, self.residue_index)


@dataclass
class ForwardResult:
    hidden: torch.Tensor  # (N, D_a) flat over valid residues
    mlm: torch.Tensor  # scalar
    mlm_per_position: torch.Tensor
    residues: ResidueLossSet


def masked_mean(values: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over selected entries; written so an all-ones mask is bitwise equal to no mask."""
    if mask is None:
        return values.sum() / len(values)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("selection mask selects no residues")
    return (values * mask.to(values.dtype)).sum() / count


def flat_hidden(bundle: ModelBundle, batch: Batch) -> torch.Tensor:
    t = batch.tensors
    hidden = bundle.encode(t["input_ids"], t["valid"])
    return hidden[t["valid"]]


def mlm_loss(bundle: ModelBundle, batch: Batch, hidden: Optional[torch.Tensor] = None
             ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy averaged over masked positions only."""
    t = batch.tensors
    if hidden is None:
        hidden = flat_hidden(bundle, batch)
    sel = t["mlm_mask"][t["valid"]]
    if not sel.any():
        raise ValueError("batch has no masked positions")
    targets = t["target_ids"][t["valid"]][sel]
    per = F.cross_entropy(bundle.mlm_logits(hidden[sel]), targets, reduction="none")
    return per.sum() / len(per), per


def similarity_matrix(bundle: ModelBundle, batch: Batch, hidden: Optional[torch.Tensor] = None) -> torch.Tensor:
    """delta[r, c] = s * <proj_a(h_r), proj_g(g_c)> over all residue pairs in the batch."""
    t = batch.tensors
    if "gnn_emb" not in t:
        raise ValueError("every record in the batch needs a structure embedding")
    if hidden is None:
        hidden = flat_hidden(bundle, batch)
    za = bundle.project(hidden, "a")
    zg = bundle.project(t["gnn_emb"], "g")
    return bundle.scale() * (za @ zg.T)


def a2g_losses(delta: torch.Tensor) -> torch.Tensor:
    """Per-row softmax cross-entropy with the diagonal as positive."""
    if delta.dim() != 2 or delta.shape[0] != delta.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {tuple(delta.shape)}")
    if delta.shape[0] == 0:
        raise ValueError("empty similarity matrix")
    return torch.logsumexp(delta, dim=1) - delta.diagonal()


def g2a_losses(delta: torch.Tensor) -> torch.Tensor:
    """Per-column softmax cross-entropy with the diagonal as positive."""
    return a2g_losses(delta.T)


def latent_loss(a2g_mean: torch.Tensor | float, g2a_mean: torch.Tensor | float):
    return 0.5 * (a2g_mean + g2a_mean)


def physical_losses(bundle: ModelBundle, batch: Batch, hidden: Optional[torch.Tensor] = None) -> torch.Tensor:
    t = batch.tensors
    if "struct_tokens" not in t:
        raise ValueError("every record in the batch needs structure tokens")
    tokens = t["struct_tokens"]
    K = bundle.config.n_struct_tokens
    if (tokens >= K).any() or (tokens < 0).any():
        raise ValueError(f"structure token outside [0, {K})")
    if hidden is None:
        hidden = flat_hidden(bundle, batch)
    return F.cross_entropy(bundle.struct_logits(hidden), tokens, reduction="none")


def residue_losses(bundle: ModelBundle, batch: Batch) -> ForwardResult:
    """One forward pass over the masked input feeding all loss families."""
    hidden = flat_hidden(bundle, batch)
    mlm, mlm_per = mlm_loss(bundle, batch, hidden)
    delta = similarity_matrix(bundle, batch, hidden)
    t = batch.tensors
    rls = ResidueLossSet(
        a2g=a2g_losses(delta),
        g2a=g2a_losses(delta),
        physical=physical_losses(bundle, batch, hidden),
        batch_index=t["batch_index"],
        residue_index=t["residue_index"],
    )
    return ForwardResult(hidden, mlm, mlm_per, rls)


def combine(mlm: torch.Tensor, residues: ResidueLossSet, weights: LossWeights,
            masks: Optional[Dict[str, torch.Tensor]] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """mlm + w_latent * latent + w_physical * physical, structural terms averaged over selected residues."""
    masks = masks or {}
    parts = {fam: masked_mean(residues.family(fam), masks.get(fam)) for fam in FAMILIES}
    parts["mlm"] = mlm
    parts["latent"] = latent_loss(parts["a2g"], parts["g2a"])
    total = mlm
    if weights.latent:
        total = total + weights.latent * parts["latent"]
    if weights.physical:
        total = total + weights.physical * parts["physical"]
    parts["overall"] = total
    return total, parts


def overall_loss(bundle: ModelBundle, batch: Batch, weights: LossWeights = LossWeights(),
                 masks: Optional[Dict[str, torch.Tensor]] = None
                 ) -> Tuple[torch.Tensor, ResidueLossSet, Dict[str, torch.Tensor]]:
    fwd = residue_losses(bundle, batch)
    total, parts = combine(fwd.mlm, fwd.residues, weights, masks)
    return total, fwd.residues, parts
