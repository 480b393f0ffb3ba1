"""Residue loss selection: excess loss against a frozen reference model and top-rho masks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import torch

from .corpus import Batch
from .losses import FAMILIES, ResidueLossSet, residue_losses
from .model import ModelBundle, PlmConfig

STRATEGIES = ("excess", "loss-large", "loss-small", "full")


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "excess"
    rho: float = 0.8

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if self.kind == "full" and self.rho != 1.0:
            raise ValueError("strategy 'full' implies rho = 1")

    @classmethod
    def make(cls, kind: str, rho: float = 0.8) -> "SelectionStrategy":
        return cls(kind, 1.0 if kind == "full" else rho)

    @property
    def needs_reference(self) -> bool:
        return self.kind == "excess"


@dataclass
class ExcessLossSet:
    a2g: torch.Tensor
    g2a: torch.Tensor
    physical: torch.Tensor

    def family(self, name: str) -> torch.Tensor:
        return getattr(self, name)


def n_selected(n: int, rho: float) -> int:
    # tolerance absorbs binary representation error, e.g. 0.29 * 100
    return max(1, min(n, math.floor(n * rho + 1e-9)))


def excess_losses(current: ResidueLossSet, reference: ResidueLossSet) -> ExcessLossSet:
    if len(current) != len(reference):
        raise ValueError(f"current has {len(current)} residues, reference {len(reference)}")
    if not torch.equal(current.batch_index, reference.batch_index) or \
            not torch.equal(current.residue_index, reference.residue_index):
        raise ValueError("current and reference losses index different residues")
    return ExcessLossSet(*(current.family(f).detach() - reference.family(f).detach() for f in FAMILIES))


def select(values: torch.Tensor, strategy: SelectionStrategy) -> torch.Tensor:
    """Boolean mask of the selected entries; ties resolve toward the lower index."""
    n = len(values)
    if n < 1:
        raise ValueError("nothing to select from")
    if strategy.kind == "full" or strategy.rho >= 1.0:
        return torch.ones(n, dtype=torch.bool)
    k = n_selected(n, strategy.rho)
    descending = strategy.kind in ("excess", "loss-large")
    order = torch.sort(values.detach(), descending=descending, stable=True).indices
    mask = torch.zeros(n, dtype=torch.bool)
    mask[order[:k]] = True
    return mask


def reference_losses(reference: ModelBundle, batch: Batch, like: Optional[PlmConfig] = None) -> ResidueLossSet:
    """Per-residue losses of the frozen reference on the identical batch and masking plan."""
    if like is not None:
        rc = reference.config
        if rc.n_struct_tokens != like.n_struct_tokens or rc.gnn_dim != like.gnn_dim:
            raise ValueError(
                f"reference (K={rc.n_struct_tokens}, D_g={rc.gnn_dim}) does not match "
                f"model (K={like.n_struct_tokens}, D_g={like.gnn_dim})"
            )
    with torch.no_grad():
        return residue_losses(reference, batch).residues.detach()


def selection_masks(current: ResidueLossSet, strategy: SelectionStrategy,
                    reference: Optional[ResidueLossSet] = None) -> Dict[str, torch.Tensor]:
    """One mask per structural loss family, chosen independently."""
    if strategy.needs_reference:
        if reference is None:
            raise ValueError("excess selection needs reference losses")
        scores = excess_losses(current, reference)
        return {f: select(scores.family(f), strategy) for f in FAMILIES}
    return {f: select(current.family(f).detach(), strategy) for f in FAMILIES}


class SelectionAudit:
    """Optional CSV of every selection decision."""

    HEADER = ["step", "family", "flat_index", "current", "reference", "delta", "selected"]

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.HEADER)

    def record(self, step: int, current: ResidueLossSet, reference: Optional[ResidueLossSet],
               masks: Dict[str, torch.Tensor]) -> None:
        for fam in FAMILIES:
            cur = current.family(fam).detach().tolist()
            ref = reference.family(fam).tolist() if reference is not None else [float("nan")] * len(cur)
            sel = masks[fam].tolist()
            for idx, (c, r, s) in enumerate(zip(cur, ref, sel)):
                self._writer.writerow([step, fam, idx, repr(c), repr(r), repr(c - r), int(s)])

    def close(self) -> None:
        self._fh.close()
