"""Small transformer-encoder protein LM with MLM head, structure-token head and
the two projections + learnable scale used for residue contrastive alignment."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import ALPHABET, MASK_ID, PAD_ID, VOCAB_SIZE, encode_sequence
from .nn import DTYPE, ParamGroup

CHECKPOINT_FORMAT = "structalign-checkpoint-v1"
LOG_SCALE_INIT = math.log(1.0 / 0.07)
LOG_SCALE_MAX = math.log(100.0)


class FrozenModelError(RuntimeError):
    pass


@dataclass
class PlmConfig:
    d_model: int = 64  # D_a
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 64
    proj_dim: int = 32  # D
    gnn_dim: int = 16  # D_g
    n_struct_tokens: int = 20  # K
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.proj_dim < 4:
            raise ValueError("proj_dim must be >= 4")
        if self.n_struct_tokens < 2:
            raise ValueError("need at least 2 structure tokens")

    def smaller(self) -> "PlmConfig":
        """Half the depth and width, same interfaces (K, D_g, D)."""
        heads = max(1, self.n_heads // 2)
        width = max(heads, self.d_model // 2)
        width -= width % heads
        return replace(self, d_model=width, n_layers=max(1, self.n_layers // 2), n_heads=heads)


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.out = nn.Linear(d, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.ff1 = nn.Linear(d, 4 * d, dtype=DTYPE)
        self.ff2 = nn.Linear(4 * d, d, dtype=DTYPE)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).view(B, L, 3, h, d // h).permute(2, 0, 3, 1, 4)
        attn = F.scaled_dot_product_attention(q, k, v, attn_mask=key_mask[:, None, None, :])
        x = x + self.out(attn.transpose(1, 2).reshape(B, L, d))
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


def _mlp_head(d_in: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_in, dtype=DTYPE), nn.GELU(), nn.Linear(d_in, d_out, dtype=DTYPE))


class ModelBundle(nn.Module):
    """Encoder (theta), MLM head (alpha), structure head (beta), W_a, W_g and log-scale s."""

    def __init__(self, config: PlmConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.frozen = False
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            d = config.d_model
            self.tok_emb = nn.Embedding(config.vocab_size, d, dtype=DTYPE)
            self.pos_emb = nn.Embedding(config.max_len, d, dtype=DTYPE)
            nn.init.normal_(self.tok_emb.weight, std=0.1)
            nn.init.normal_(self.pos_emb.weight, std=0.1)
            self.blocks = nn.ModuleList([Block(d, config.n_heads) for _ in range(config.n_layers)])
            self.ln_f = nn.LayerNorm(d, dtype=DTYPE)
            self.mlm_head = _mlp_head(d, config.vocab_size)
            self.struct_head = _mlp_head(d, config.n_struct_tokens)
            self.w_a = nn.Linear(d, config.proj_dim, bias=False, dtype=DTYPE)
            self.w_g = nn.Linear(config.gnn_dim, config.proj_dim, bias=False, dtype=DTYPE)
            self.log_scale = nn.Parameter(torch.tensor(LOG_SCALE_INIT, dtype=DTYPE))

    # -- parameter bookkeeping -------------------------------------------------

    BACKBONE_PREFIXES = ("tok_emb.", "pos_emb.", "blocks.", "ln_f.")

    def named_groups(self) -> Dict[str, Dict[str, nn.Parameter]]:
        groups: Dict[str, Dict[str, nn.Parameter]] = {"backbone": {}, "heads": {}}
        for name, p in self.named_parameters():
            key = "backbone" if name.startswith(self.BACKBONE_PREFIXES) else "heads"
            groups[key][name] = p
        return groups

    def param_groups(self, lr_backbone: float, lr_heads: float, weight_decay: float = 0.01) -> list[ParamGroup]:
        if self.frozen:
            raise FrozenModelError("model is frozen; it cannot be optimized")
        out = []
        for key, lr in (("backbone", lr_backbone), ("heads", lr_heads)):
            named = self.named_groups()[key]
            out.append(ParamGroup(key, list(named.values()), lr, weight_decay, names=list(named)))
        return out

    ALIGNMENT_PREFIXES = ("struct_head.", "w_a.", "w_g.", "log_scale")

    def reset_alignment_heads(self, seed: int) -> "ModelBundle":
        """Re-initialize the structure head, both projections and the scale; backbone and MLM head are kept."""
        if self.frozen:
            raise FrozenModelError("model is frozen")
        fresh = ModelBundle(self.config, seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith(self.ALIGNMENT_PREFIXES):
                    p.copy_(dict(fresh.named_parameters())[name])
        return self

    def freeze(self) -> "ModelBundle":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def checksum(self) -> float:
        with torch.no_grad():
            return float(sum(p.double().abs().sum() + p.double().sum() for p in self.parameters()))

    # -- forward pieces --------------------------------------------------------

    def encode(self, input_ids: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Hidden states (B, L, D_a) for token ids (B, L) or (L,)."""
        squeeze = input_ids.dim() == 1
        if squeeze:
            input_ids = input_ids[None]
        B, L = input_ids.shape
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        if (input_ids < 0).any() or (input_ids >= self.config.vocab_size).any():
            raise ValueError("token id outside the vocabulary")
        if valid is None:
            valid = input_ids != PAD_ID
        elif squeeze and valid.dim() == 1:
            valid = valid[None]
        pos = torch.arange(L)
        x = self.tok_emb(input_ids) + self.pos_emb(pos)[None]
        for blk in self.blocks:
            x = blk(x, valid)
        x = self.ln_f(x)
        return x[0] if squeeze else x

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(hidden)

    def struct_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.struct_head(hidden)

    def scale(self) -> torch.Tensor:
        return torch.exp(torch.clamp(self.log_scale, max=LOG_SCALE_MAX))

    def project(self, x: torch.Tensor, which: str) -> torch.Tensor:
        """Project sequence ('a') or structure ('g') rows to D and L2-normalize them."""
        if which == "a":
            lin = self.w_a
        elif which == "g":
            lin = self.w_g
        else:
            raise ValueError(f"which must be 'a' or 'g', got {which!r}")
        if x.shape[-1] != lin.in_features:
            raise ValueError(f"input width {x.shape[-1]} != projection width {lin.in_features}")
        z = lin(x)
        norm = z.norm(dim=-1, keepdim=True)
        if (norm == 0).any():
            raise ValueError("zero-norm row cannot be normalized")
        return z / norm

    def residue_log_probs(self, sequence: str, positions: Sequence[int]) -> torch.Tensor:
        """log p(residue | sequence with only that position masked), restricted to the 20 amino acids.

        One row per requested position; each row is its own masked forward pass.
        """
        ids = torch.from_numpy(encode_sequence(sequence))
        positions = list(positions)
        batch = ids.repeat(len(positions), 1)
        batch[torch.arange(len(positions)), torch.tensor(positions, dtype=torch.long)] = MASK_ID
        with torch.no_grad():
            hidden = self.encode(batch)
            logits = self.mlm_logits(hidden[torch.arange(len(positions)), torch.tensor(positions)])
        return torch.log_softmax(logits[:, : len(ALPHABET)], dim=-1)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: str | Path, bundle: ModelBundle, optimizer_state: Optional[dict] = None,
                    step: int = 0, extra: Optional[Dict[str, Any]] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(bundle.config),
        "params": {k: v.detach().clone() for k, v in bundle.state_dict().items()},
        "frozen": bundle.frozen,
        "optimizer": optimizer_state,
        "rng": {"torch": torch.get_rng_state()},
        "step": step,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Tuple[ModelBundle, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a structalign checkpoint")
    bundle = ModelBundle(PlmConfig(**payload["config"]))
    bundle.load_state_dict(payload["params"])
    if payload.get("frozen"):
        bundle.freeze()
    return bundle, payload
