"""Protein records, JSON-lines I/O, reference-set curation, masking and batching."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

logger = logging.getLogger(__name__)

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
AA_TO_ID = {a: i for i, a in enumerate(ALPHABET)}
MASK_ID = len(ALPHABET)  # 20
PAD_ID = MASK_ID + 1  # 21
VOCAB_SIZE = PAD_ID + 1  # 22

SS_CLASSES = "HEC"
SS_TO_ID = {s: i for i, s in enumerate(SS_CLASSES)}

DEFAULT_RES_MAX = 2.0
DEFAULT_RFREE_MAX = 0.20


class CorpusError(ValueError):
    """Malformed corpus data."""


@dataclass
class ProteinRecord:
    id: str
    sequence: str
    coords: np.ndarray  # (L, 3) C-alpha, angstrom
    gnn_embedding: Optional[np.ndarray] = None  # (L, D_g)
    structure_tokens: Optional[np.ndarray] = None  # (L,) int
    resolution: float = 1.5
    r_free: float = 0.15
    ss_labels: Optional[str] = None
    # ground truth kept by the generator; not part of the file format contract
    corrupted: bool = False

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.gnn_embedding is not None:
            self.gnn_embedding = np.asarray(self.gnn_embedding, dtype=np.float64)
        if self.structure_tokens is not None:
            self.structure_tokens = np.asarray(self.structure_tokens, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.sequence)

    def validate(self, codebook_size: Optional[int] = None) -> None:
        L = len(self.sequence)
        if L < 2:
            raise CorpusError(f"record {self.id}: length {L} < 2")
        bad = set(self.sequence) - set(ALPHABET)
        if bad:
            raise CorpusError(f"record {self.id}: unknown residue symbols {sorted(bad)}")
        if self.coords.shape != (L, 3):
            raise CorpusError(f"record {self.id}: coords shape {self.coords.shape} != ({L}, 3)")
        if self.gnn_embedding is not None and (self.gnn_embedding.ndim != 2 or len(self.gnn_embedding) != L):
            raise CorpusError(f"record {self.id}: gnn_emb length {len(self.gnn_embedding)} != {L}")
        if self.structure_tokens is not None:
            if self.structure_tokens.shape != (L,):
                raise CorpusError(f"record {self.id}: tokens length {len(self.structure_tokens)} != {L}")
            if (self.structure_tokens < 0).any():
                raise CorpusError(f"record {self.id}: negative structure token")
            if codebook_size is not None and (self.structure_tokens >= codebook_size).any():
                raise CorpusError(f"record {self.id}: structure token >= codebook size {codebook_size}")
        if self.ss_labels is not None:
            if len(self.ss_labels) != L or set(self.ss_labels) - set(SS_CLASSES):
                raise CorpusError(f"record {self.id}: ss labels must be length {L} over 'HEC'")
        if not self.resolution > 0:
            raise CorpusError(f"record {self.id}: resolution must be > 0")
        for name in ("coords", "gnn_embedding"):
            arr = getattr(self, name)
            if arr is not None and not np.isfinite(arr).all():
                raise CorpusError(f"record {self.id}: non-finite values in {name}")

    def slice(self, start: int, stop: int) -> "ProteinRecord":
        """Contiguous residue window; every per-residue field is cut identically."""
        return replace(
            self,
            sequence=self.sequence[start:stop],
            coords=self.coords[start:stop].copy(),
            gnn_embedding=None if self.gnn_embedding is None else self.gnn_embedding[start:stop].copy(),
            structure_tokens=None if self.structure_tokens is None else self.structure_tokens[start:stop].copy(),
            ss_labels=None if self.ss_labels is None else self.ss_labels[start:stop],
        )

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "seq": self.sequence,
            "coords": self.coords.tolist(),
        }
        if self.gnn_embedding is not None:
            out["gnn_emb"] = self.gnn_embedding.tolist()
        if self.structure_tokens is not None:
            out["tokens"] = self.structure_tokens.tolist()
        out["resolution"] = float(self.resolution)
        out["r_free"] = float(self.r_free)
        if self.ss_labels is not None:
            out["ss"] = self.ss_labels
        if self.corrupted:
            out["corrupted"] = True
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ProteinRecord":
        try:
            return cls(
                id=str(obj["id"]),
                sequence=obj["seq"],
                coords=np.asarray(obj["coords"], dtype=np.float64).reshape(-1, 3),
                gnn_embedding=None if obj.get("gnn_emb") is None else np.asarray(obj["gnn_emb"], dtype=np.float64),
                structure_tokens=None if obj.get("tokens") is None else np.asarray(obj["tokens"], dtype=np.int64),
                resolution=float(obj["resolution"]),
                r_free=float(obj["r_free"]),
                ss_labels=obj.get("ss"),
                corrupted=bool(obj.get("corrupted", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"record {obj.get('id', '?')}: {exc}") from exc


def load_corpus(path: str | Path) -> List[ProteinRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            rec = ProteinRecord.from_json(obj)
            rec.validate()
            records.append(rec)
    return records


def save_corpus(records: Iterable[ProteinRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")))
            fh.write("\n")


def curate_reference(
    corpus: Sequence[ProteinRecord],
    res_max: float = DEFAULT_RES_MAX,
    rfree_max: float = DEFAULT_RFREE_MAX,
) -> List[ProteinRecord]:
    """Keep records strictly below both quality thresholds, order preserved."""
    kept = [r for r in corpus if r.resolution < res_max and r.r_free < rfree_max]
    if not kept:
        warnings.warn("reference curation removed every record")
    return kept


# replacement policies recorded per masked position
POLICY_MASK, POLICY_RANDOM, POLICY_KEEP = 0, 1, 2


@dataclass
class MaskPlan:
    positions: np.ndarray  # sorted, 0-based
    policy: np.ndarray  # one of POLICY_* per position

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.policy = np.asarray(self.policy, dtype=np.int64)


def encode_sequence(sequence: str) -> np.ndarray:
    return np.fromiter((AA_TO_ID[a] for a in sequence), dtype=np.int64, count=len(sequence))


def num_masked(length: int, mask_rate: float) -> int:
    # round half up: 1.5 -> 2 (Python's round() would give banker's rounding)
    return max(1, int(np.floor(mask_rate * length + 0.5)))


def mask_sequence(
    record: ProteinRecord | str,
    mask_rate: float = 0.15,
    seed: int | np.random.Generator = 0,
    policy_probs: Tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> Tuple[np.ndarray, MaskPlan]:
    """Masked token ids and the plan that produced them.

    Each chosen position becomes [mask] with prob 0.8, a random residue with
    prob 0.1, or stays unchanged with prob 0.1.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError(f"mask_rate must be in (0, 1), got {mask_rate}")
    seq = record.sequence if isinstance(record, ProteinRecord) else record
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = encode_sequence(seq)
    L = len(ids)
    m = min(L, num_masked(L, mask_rate))
    positions = np.sort(rng.choice(L, size=m, replace=False))
    policy = rng.choice(3, size=m, p=policy_probs)
    random_res = rng.integers(0, len(ALPHABET), size=m)
    masked = ids.copy()
    for k, (pos, pol) in enumerate(zip(positions, policy)):
        if pol == POLICY_MASK:
            masked[pos] = MASK_ID
        elif pol == POLICY_RANDOM:
            masked[pos] = random_res[k]
    return masked, MaskPlan(positions, policy)


@dataclass
class Batch:
    records: List[ProteinRecord]
    masked_ids: List[np.ndarray]
    plans: List[MaskPlan]

    def __post_init__(self) -> None:
        if len(self.records) != len(self.masked_ids) or len(self.records) != len(self.plans):
            raise ValueError("records, masked ids and plans must align")

    @property
    def lengths(self) -> List[int]:
        return [len(r) for r in self.records]

    @property
    def n_residues(self) -> int:
        return sum(self.lengths)

    @cached_property
    def tensors(self) -> dict:
        """Padded model inputs plus flat per-residue targets in (b, i) row-major order."""
        B = len(self.records)
        Lmax = max(self.lengths)
        inp = torch.full((B, Lmax), PAD_ID, dtype=torch.long)
        true = torch.full((B, Lmax), PAD_ID, dtype=torch.long)
        valid = torch.zeros((B, Lmax), dtype=torch.bool)
        mlm = torch.zeros((B, Lmax), dtype=torch.bool)
        for b, (rec, ids, plan) in enumerate(zip(self.records, self.masked_ids, self.plans)):
            L = len(rec)
            inp[b, :L] = torch.from_numpy(ids)
            true[b, :L] = torch.from_numpy(encode_sequence(rec.sequence))
            valid[b, :L] = True
            mlm[b, torch.from_numpy(plan.positions)] = True
        out = {"input_ids": inp, "target_ids": true, "valid": valid, "mlm_mask": mlm}
        out["batch_index"] = torch.cat([torch.full((L,), b, dtype=torch.long) for b, L in enumerate(self.lengths)])
        out["residue_index"] = torch.cat([torch.arange(L) for L in self.lengths])
        if all(r.gnn_embedding is not None for r in self.records):
            out["gnn_emb"] = torch.from_numpy(np.concatenate([r.gnn_embedding for r in self.records]))
        if all(r.structure_tokens is not None for r in self.records):
            out["struct_tokens"] = torch.from_numpy(np.concatenate([r.structure_tokens for r in self.records]))
        return out


def make_batch(records: Sequence[ProteinRecord], mask_rate: float = 0.15,
               seed: int | np.random.Generator = 0) -> Batch:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    masked, plans = [], []
    for rec in records:
        ids, plan = mask_sequence(rec, mask_rate, rng)
        masked.append(ids)
        plans.append(plan)
    return Batch(list(records), masked, plans)


def truncate(record: ProteinRecord, max_len: int, rng: np.random.Generator) -> ProteinRecord:
    if len(record) <= max_len:
        return record
    start = int(rng.integers(0, len(record) - max_len + 1))
    return record.slice(start, start + max_len)


def make_batches(
    corpus: Sequence[ProteinRecord],
    max_records_per_batch: int = 16,
    max_len: int = 64,
    seed: int | Sequence[int] = 0,
    mask_rate: float = 0.15,
    shuffle: bool = True,
) -> List[Batch]:
    """Seeded shuffle, random-window truncation and masking; every record lands in exactly one batch."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus)) if shuffle else np.arange(len(corpus))
    batches = []
    for start in range(0, len(order), max_records_per_batch):
        chunk = [truncate(corpus[int(k)], max_len, rng) for k in order[start:start + max_records_per_batch]]
        batches.append(make_batch(chunk, mask_rate, rng))
    return batches


def split_train_val(corpus: Sequence[ProteinRecord], val_fraction: float = 0.1,
                    seed: int = 0) -> Tuple[List[ProteinRecord], List[ProteinRecord]]:
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(corpus))
    n_val = int(round(val_fraction * len(corpus)))
    if val_fraction > 0 and len(corpus) > 1:
        n_val = max(1, n_val)
    val = [corpus[int(k)] for k in order[:n_val]]
    train = [corpus[int(k)] for k in order[n_val:]]
    return train, val
