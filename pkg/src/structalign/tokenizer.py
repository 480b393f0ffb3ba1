"""Structure tokens: a nearest-residue geometric descriptor quantized by k-means."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 9
MIN_OFFSET = 2  # nearest-neighbor search ignores |i - j| < 2


def _backbone_vectors(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors into (u_in) and out of (u_out) each residue; one-sided at chain ends."""
    step = coords[1:] - coords[:-1]
    step = step / np.linalg.norm(step, axis=1, keepdims=True)
    u_in = np.vstack([step[:1], step])
    u_out = np.vstack([step, step[-1:]])
    return u_in, u_out


def nearest_partners(coords: np.ndarray) -> np.ndarray:
    """Index of the spatially closest residue with |i - j| >= 2, ties to the lower index."""
    L = len(coords)
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    idx = np.arange(L)
    d = np.where(np.abs(idx[:, None] - idx[None, :]) < MIN_OFFSET, np.inf, d)
    # rounding keeps the tie-break stable under rigid motion
    return np.argmin(np.round(d, 6), axis=1)


def descriptors(coords: np.ndarray) -> np.ndarray:
    """(L, 9) descriptors for every residue of one chain."""
    coords = np.asarray(coords, dtype=np.float64)
    L = len(coords)
    if L < 4:
        raise ValueError(f"descriptor needs L >= 4, got {L}")
    j = nearest_partners(coords)
    u_in, u_out = _backbone_vectors(coords)
    v = coords[j] - coords
    dist = np.linalg.norm(v, axis=1)
    v = v / dist[:, None]
    a1, a2 = u_in, u_out  # segment around i
    b1, b2 = u_in[j], u_out[j]  # segment around j*

    def cos(x, y):
        return np.einsum("ij,ij->i", x, y)

    return np.stack([
        cos(a1, a2), cos(b1, b2), cos(a1, v), cos(b1, v),
        cos(a1, b2), cos(a2, b1), cos(a1, b1),
        dist / 10.0,
        np.sign(j - np.arange(L)).astype(np.float64),
    ], axis=1)


def descriptor(coords: np.ndarray, i: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if not 0 <= i < len(coords):
        raise IndexError(f"residue index {i} out of range for L={len(coords)}")
    return descriptors(coords)[i]


@dataclass
class Codebook:
    centroids: np.ndarray
    fit_seed: int = 0

    def __post_init__(self) -> None:
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.K < 2:
            raise ValueError("codebook needs a (K >= 2, dim) centroid array")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path: str | Path) -> None:
        payload = {"K": self.K, "dim": self.dim, "centroids": self.centroids.tolist(), "fit_seed": self.fit_seed}
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        obj = json.loads(Path(path).read_text())
        cb = cls(np.asarray(obj["centroids"], dtype=np.float64), int(obj.get("fit_seed", 0)))
        if cb.K != obj["K"] or cb.dim != obj["dim"]:
            raise ValueError(f"{path}: K/dim header does not match centroid array")
        return cb


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 2048) -> np.ndarray:
    # explicit differences, not the |x|^2 - 2x.c + |c|^2 expansion: exact zeros keep ties exact
    out = np.empty((len(x), len(c)))
    for s in range(0, len(x), chunk):
        diff = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum: ties go to the lower centroid id
    return np.argmin(_sq_dists(x, centroids), axis=1)


def kmeans_objective(x: np.ndarray, centroids: np.ndarray) -> float:
    return float(_sq_dists(x, centroids).min(axis=1).sum())


def _kmeanspp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen]).ravel()
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            raise ValueError(f"fewer than K={K} distinct descriptors")
        nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt:nxt + 1]).ravel())
    return x[chosen].copy()


def fit_codebook(descs: np.ndarray, K: int = 20, seed: int = 0, max_iters: int = 100,
                 history: Optional[List[float]] = None) -> Codebook:
    """Lloyd's k-means with k-means++ seeding; empty clusters jump to the worst-served point.

    If ``history`` is given, the objective after every iteration is appended.
    """
    x = np.asarray(descs, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("descriptors must be a 2-D array")
    if len(x) < K:
        raise ValueError(f"need at least K={K} descriptors, got {len(x)}")
    if K < 2:
        raise ValueError("K must be >= 2")
    rng = np.random.default_rng(seed)
    c = _kmeanspp(x, K, rng)
    labels = assign(x, c)
    for _ in range(max_iters):
        new = c.copy()
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        for k in np.flatnonzero(~nonempty):
            cost = _sq_dists(x, new).min(axis=1)
            new[k] = x[int(np.argmax(cost))]
        new_labels = assign(x, new)
        c = new
        if history is not None:
            history.append(kmeans_objective(x, c))
        if np.array_equal(new_labels, labels) and nonempty.all():
            labels = new_labels
            break
        labels = new_labels
    return Codebook(c, seed)


def tokenize(coords: np.ndarray, codebook: Codebook) -> np.ndarray:
    d = descriptors(coords)
    if d.shape[1] != codebook.dim:
        raise ValueError(f"descriptor dim {d.shape[1]} != codebook dim {codebook.dim}")
    return assign(d, codebook.centroids)


def corpus_descriptors(coord_sets: Iterable[np.ndarray]) -> np.ndarray:
    return np.vstack([descriptors(c) for c in coord_sets])


def fit_corpus_codebook(records: Sequence, K: int = 20, seed: int = 0, max_iters: int = 100) -> Codebook:
    """Fit on every residue of the given records."""
    return fit_codebook(corpus_descriptors(r.coords for r in records), K, seed, max_iters)
