"""Frozen-model probes (contacts, secondary structure), pseudo-perplexity,
zero-shot mutation scoring, rank correlation and embedding export."""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import ALPHABET, AA_TO_ID, SS_CLASSES, ProteinRecord, encode_sequence
from .model import ModelBundle
from .nn import DTYPE
from .synthgen import contact_map

logger = logging.getLogger(__name__)


@dataclass
class ProbeConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    hidden: int = 128
    seed: int = 0
    # contact probe: all contacts plus random non-contacts, up to this many pairs per protein
    max_pairs_per_protein: int = 64
    contact_threshold: float = 8.0
    min_separation: int = 6
    # proteins are cropped to min(length_cutoff, model max_len) residues
    length_cutoff: int = 512

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        for name in ("epochs", "batch_size", "lr", "hidden", "max_pairs_per_protein", "length_cutoff"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class ProbeReport:
    task: str
    metric: str
    value: float
    per_protein: List[float] = field(default_factory=list)
    seed: int = 0


# ---------------------------------------------------------------------------
# embeddings

def embed_records(bundle: ModelBundle, records: Sequence[ProteinRecord]) -> List[torch.Tensor]:
    """Unmasked last-layer hidden states (L, D_a) per record; sequences longer than max_len are cropped."""
    out = []
    max_len = bundle.config.max_len
    was_training = bundle.training
    bundle.eval()
    with torch.no_grad():
        for rec in records:
            if len(rec) > max_len:
                logger.warning("%s: length %d cropped to %d", rec.id, len(rec), max_len)
            ids = torch.from_numpy(encode_sequence(rec.sequence[:max_len]))
            out.append(bundle.encode(ids).clone())
    bundle.train(was_training)
    return out


def _cropped(records: Sequence[ProteinRecord], max_len: int) -> List[ProteinRecord]:
    return [r.slice(0, min(len(r), max_len)) for r in records]


def export_embeddings(bundle: ModelBundle, records: Sequence[ProteinRecord], path: str | Path) -> int:
    """CSV with one row per residue; floats are written with repr so they round-trip exactly."""
    feats = embed_records(bundle, records)
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["protein_id", "index", "residue", "ss"] + [f"e{k}" for k in range(bundle.config.d_model)])
        for rec, h in zip(records, feats):
            for i, vec in enumerate(h.tolist()):
                ss = rec.ss_labels[i] if rec.ss_labels else ""
                w.writerow([rec.id, i, rec.sequence[i], ss] + [repr(v) for v in vec])
                rows += 1
    return rows


def load_embeddings(path: str | Path) -> Dict[str, np.ndarray]:
    out: Dict[str, List[List[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out.setdefault(row[0], []).append([float(v) for v in row[4:]])
    return {k: np.asarray(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# probe heads

class MLPProbe(nn.Module):
    def __init__(self, d_in: int, d_out: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, hidden, dtype=DTYPE), nn.GELU(),
                                 nn.Linear(hidden, d_out, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def pair_features(hi: torch.Tensor, hj: torch.Tensor) -> torch.Tensor:
    return torch.cat([hi, hj, hi * hj, (hi - hj).abs()], dim=-1)


def pair_scores(probe: MLPProbe, h: torch.Tensor, i: torch.Tensor, j: torch.Tensor) -> torch.Tensor:
    """Symmetrized contact logits for residue pairs (i, j)."""
    a = probe(pair_features(h[i], h[j])).squeeze(-1)
    b = probe(pair_features(h[j], h[i])).squeeze(-1)
    return 0.5 * (a + b)


def _fit(probe: nn.Module, n: int, loss_fn, config: ProbeConfig) -> None:
    opt = torch.optim.AdamW(probe.parameters(), lr=config.lr, betas=config.betas,
                            weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    for _ in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(idx)
            loss.backward()
            opt.step()


def _eligible_pairs(L: int, min_separation: int) -> Tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(L, k=min_separation + 1)
    return i, j


def train_contact_probe(features: Sequence[torch.Tensor], contact_maps: Sequence[np.ndarray],
                        config: ProbeConfig = ProbeConfig()) -> MLPProbe:
    """Fit a pair MLP on all contacts plus sampled non-contacts of every training protein."""
    rng = np.random.default_rng(config.seed)
    rows_p, rows_i, rows_j, labels = [], [], [], []
    for p, (h, cmap) in enumerate(zip(features, contact_maps)):
        i, j = _eligible_pairs(len(h), config.min_separation)
        if len(i) == 0:
            continue
        lab = cmap[i, j]
        pos = np.flatnonzero(lab)
        neg = np.flatnonzero(~lab)
        n_neg = max(0, config.max_pairs_per_protein - len(pos))
        neg = rng.choice(neg, size=min(n_neg, len(neg)), replace=False)
        keep = np.sort(np.concatenate([pos, neg]))
        rows_p.append(np.full(len(keep), p))
        rows_i.append(i[keep])
        rows_j.append(j[keep])
        labels.append(lab[keep])
    if not rows_p:
        raise ValueError("no protein long enough for contact pairs")
    P = torch.from_numpy(np.concatenate(rows_p))
    I = torch.from_numpy(np.concatenate(rows_i))
    J = torch.from_numpy(np.concatenate(rows_j))
    Y = torch.from_numpy(np.concatenate(labels).astype(np.float64))
    # stack features once so minibatches can gather across proteins
    offsets = torch.tensor(np.cumsum([0] + [len(h) for h in features[:-1]]))
    H = torch.cat(list(features)).detach()
    gi, gj = offsets[P] + I, offsets[P] + J

    torch.manual_seed(config.seed)
    probe = MLPProbe(4 * H.shape[1], 1, config.hidden)

    def loss_fn(idx):
        return F.binary_cross_entropy_with_logits(pair_scores(probe, H, gi[idx], gj[idx]), Y[idx])

    _fit(probe, len(Y), loss_fn, config)
    return probe


def precision_at_l5(scores: np.ndarray, cmap: np.ndarray, min_separation: int = 6) -> float:
    """Fraction of true contacts among the top max(1, L // 5) scored pairs with |i - j| > min_separation.

    ``scores`` is an (L, L) matrix; only its upper triangle is read. Ties keep the earlier pair.
    """
    L = len(cmap)
    i, j = _eligible_pairs(L, min_separation)
    if len(i) == 0:
        raise ValueError(f"no pair with separation > {min_separation} for L={L}")
    k = min(len(i), max(1, L // 5))
    order = np.argsort(-scores[i, j], kind="stable")[:k]
    return float(cmap[i[order], j[order]].mean())


def eval_contact_probe(probe: MLPProbe, features: Sequence[torch.Tensor], contact_maps: Sequence[np.ndarray],
                       min_separation: int = 6) -> List[float]:
    out = []
    with torch.no_grad():
        for h, cmap in zip(features, contact_maps):
            L = len(h)
            i, j = _eligible_pairs(L, min_separation)
            if len(i) == 0:
                logger.warning("protein of length %d has no pair with separation > %d; skipped", L, min_separation)
                continue
            s = pair_scores(probe, h, torch.from_numpy(i), torch.from_numpy(j)).numpy()
            mat = np.full((L, L), -np.inf)
            mat[i, j] = s
            out.append(precision_at_l5(mat, cmap, min_separation))
    return out


def _split(records: Sequence[ProteinRecord], seed: int) -> Tuple[List, List]:
    order = np.random.default_rng(seed).permutation(len(records))
    cut = max(1, int(round(0.8 * len(records))))
    return [records[k] for k in order[:cut]], [records[k] for k in order[cut:]]


def probe_contact(bundle: ModelBundle, train_records: Sequence[ProteinRecord],
                  test_records: Optional[Sequence[ProteinRecord]] = None,
                  config: ProbeConfig = ProbeConfig()) -> ProbeReport:
    """Contact P@L/5 of a pair MLP trained on frozen embeddings."""
    if test_records is None:
        train_records, test_records = _split(train_records, config.seed)
    if not test_records:
        raise ValueError("contact probe needs test proteins")
    before = bundle.checksum()
    max_len = min(config.length_cutoff, bundle.config.max_len)
    tr = _cropped(train_records, max_len)
    te = _cropped(test_records, max_len)
    cm = lambda rs: [contact_map(r.coords, config.contact_threshold, config.min_separation) for r in rs]
    probe = train_contact_probe(embed_records(bundle, tr), cm(tr), config)
    per = eval_contact_probe(probe, embed_records(bundle, te), cm(te), config.min_separation)
    if bundle.checksum() != before:
        raise RuntimeError("probe training modified the frozen model")
    if not per:
        raise ValueError("no test protein long enough to score")
    return ProbeReport("contact", "P@L/5", float(np.mean(per)), per, config.seed)


def train_ss_probe(features: Sequence[torch.Tensor], labels: Sequence[np.ndarray],
                   config: ProbeConfig = ProbeConfig()) -> MLPProbe:
    X = torch.cat(list(features)).detach()
    Y = torch.from_numpy(np.concatenate(labels)).long()
    torch.manual_seed(config.seed)
    probe = MLPProbe(X.shape[1], len(SS_CLASSES), config.hidden)
    _fit(probe, len(Y), lambda idx: F.cross_entropy(probe(X[idx]), Y[idx]), config)
    return probe


def ss_label_ids(record: ProteinRecord) -> np.ndarray:
    if not record.ss_labels:
        raise ValueError(f"{record.id}: no secondary-structure labels")
    return np.array([SS_CLASSES.index(c) for c in record.ss_labels], dtype=np.int64)


def probe_ss(bundle: ModelBundle, train_records: Sequence[ProteinRecord],
             test_records: Optional[Sequence[ProteinRecord]] = None,
             config: ProbeConfig = ProbeConfig()) -> ProbeReport:
    """3-state residue accuracy of an MLP on frozen embeddings, pooled over test residues."""
    if test_records is None:
        train_records, test_records = _split(train_records, config.seed)
    before = bundle.checksum()
    max_len = min(config.length_cutoff, bundle.config.max_len)
    tr = _cropped(train_records, max_len)
    te = _cropped(test_records, max_len)
    probe = train_ss_probe(embed_records(bundle, tr), [ss_label_ids(r) for r in tr], config)
    per, correct, total = [], 0, 0
    with torch.no_grad():
        for h, r in zip(embed_records(bundle, te), te):
            hit = (probe(h).argmax(-1).numpy() == ss_label_ids(r))
            per.append(float(hit.mean()))
            correct += int(hit.sum())
            total += len(hit)
    if bundle.checksum() != before:
        raise RuntimeError("probe training modified the frozen model")
    return ProbeReport("ss", "accuracy", correct / total, per, config.seed)


# ---------------------------------------------------------------------------
# likelihood-based scores

def pseudo_perplexity(bundle: ModelBundle, sequence: str) -> float:
    """exp of the mean negative log-probability of each residue with only that residue masked."""
    if not sequence:
        raise ValueError("empty sequence")
    ids = encode_sequence(sequence)
    logp = bundle.residue_log_probs(sequence, range(len(sequence)))
    nll = -logp[torch.arange(len(ids)), torch.from_numpy(ids)].mean()
    return float(torch.exp(nll))


def mean_pseudo_perplexity(bundle: ModelBundle, records: Sequence[ProteinRecord]) -> float:
    max_len = bundle.config.max_len
    return float(np.mean([pseudo_perplexity(bundle, r.sequence[:max_len]) for r in records]))


_MUTATION = re.compile(r"^([A-Z])(\d+)([A-Z])$")


def parse_mutation(text: str, wild_type: Optional[str] = None) -> Tuple[int, str]:
    """'A12G' -> (11, 'G'): 1-based position in the text, 0-based in the result."""
    m = _MUTATION.match(text.strip())
    if not m:
        raise ValueError(f"bad mutation {text!r}; expected e.g. A12G")
    wt, pos, new = m.group(1), int(m.group(2)) - 1, m.group(3)
    if pos < 0:
        raise ValueError(f"{text}: positions are 1-based")
    for aa in (wt, new):
        if aa not in AA_TO_ID or AA_TO_ID[aa] >= len(ALPHABET):
            raise ValueError(f"{text}: {aa!r} is not a standard amino acid")
    if wild_type is not None:
        if not 0 <= pos < len(wild_type):
            raise ValueError(f"{text}: position out of range for length {len(wild_type)}")
        if wild_type[pos] != wt:
            raise ValueError(f"{text}: wild type has {wild_type[pos]!r} at position {pos + 1}")
    return pos, new


def parse_mutant(text: str, wild_type: Optional[str] = None) -> List[Tuple[int, str]]:
    """Colon-separated multi-mutant, e.g. 'A12G:L15V'."""
    muts = [parse_mutation(t, wild_type) for t in text.split(":") if t.strip()]
    if not muts:
        raise ValueError("empty mutant")
    return muts


def zero_shot_score(bundle: ModelBundle, wild_type: str, mutations: Sequence[Tuple[int, str]]) -> float:
    """Sum over mutated sites of log p(mut) - log p(wt), each site masked on its own."""
    if not mutations:
        return 0.0
    positions = [p for p, _ in mutations]
    if len(set(positions)) != len(positions):
        raise ValueError("a position is mutated more than once")
    for p, aa in mutations:
        if not 0 <= p < len(wild_type):
            raise ValueError(f"position {p} out of range for length {len(wild_type)}")
        if aa not in ALPHABET:
            raise ValueError(f"{aa!r} is not a standard amino acid")
    logp = bundle.residue_log_probs(wild_type, positions)
    total = 0.0
    for row, (p, aa) in enumerate(mutations):
        total += float(logp[row, AA_TO_ID[aa]] - logp[row, AA_TO_ID[wild_type[p]]])
    return total


def _ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties get the average of the ranks they span."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    start = 0
    while start < len(x):
        stop = start + 1
        while stop < len(x) and sorted_x[stop] == sorted_x[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D sequences of equal length")
    if len(x) < 2:
        raise ValueError("spearman needs at least 2 points")
    rx, ry = _ranks(x), _ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0:
        raise ValueError("spearman is undefined for a constant input")
    return float((rx * ry).sum() / denom)


def mutation_panel(record: ProteinRecord, n: int, seed: int = 0, max_order: int = 2) -> List[List[Tuple[int, str]]]:
    """Random single and double substitutions of one record, for zero-shot benchmarks."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        order = int(rng.integers(1, max_order + 1))
        positions = rng.choice(len(record), size=order, replace=False)
        muts = []
        for p in sorted(int(q) for q in positions):
            choices = [a for a in ALPHABET if a != record.sequence[p]]
            muts.append((p, choices[int(rng.integers(len(choices)))]))
        out.append(muts)
    return out


def zero_shot_benchmark(bundle: ModelBundle, records: Sequence[ProteinRecord], coupling: float,
                        n_mutants: int = 32, seed: int = 0) -> ProbeReport:
    """Per-protein Spearman between model scores and the generator's substitution fitness."""
    from .synthgen import substitution_fitness

    per = []
    max_len = bundle.config.max_len
    for k, rec in enumerate(records):
        rec = rec.slice(0, min(len(rec), max_len))
        panel = mutation_panel(rec, n_mutants, seed=seed * 100003 + k)
        truth = [substitution_fitness(rec, m, coupling) for m in panel]
        pred = [zero_shot_score(bundle, rec.sequence, m) for m in panel]
        try:
            per.append(spearman(pred, truth))
        except ValueError:
            continue
    if not per:
        raise ValueError("no protein produced a defined rank correlation")
    return ProbeReport("zero_shot", "spearman", float(np.mean(per)), per, seed)


def run_probes(bundle: ModelBundle, train: Sequence[ProteinRecord], test: Sequence[ProteinRecord],
               config: ProbeConfig = ProbeConfig(), which: Sequence[str] = ("contact", "ss", "ppl", "zero_shot"),
               coupling: Optional[float] = None) -> Dict[str, float]:
    out: Dict[str, float] = {}
    clean = [r for r in test if not r.corrupted] or list(test)
    if "contact" in which:
        out["contact_p_at_l5"] = probe_contact(bundle, train, test, config).value
    if "ss" in which:
        out["ss_accuracy"] = probe_ss(bundle, train, test, config).value
    if "ppl" in which:
        out["pseudo_perplexity"] = mean_pseudo_perplexity(bundle, clean)
    if "zero_shot" in which and coupling is not None:
        out["zero_shot_spearman"] = zero_shot_benchmark(bundle, clean, coupling, seed=config.seed).value
    return out
