"""Synthetic protein-like corpora.

Backbones are meanders: ideal helices and strands laid antiparallel side by
side, joined by short arcs of 3.8 A steps; chain ends are self-avoiding random
walks. Residue identities are drawn from secondary-structure-conditional
distributions, and a frozen geometry-only featurizer stands in for a
pretrained structure GNN.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np

from .corpus import ALPHABET, AA_TO_ID, ProteinRecord

logger = logging.getLogger(__name__)

CA_STEP = 3.8
HELIX_RISE, HELIX_TURN, HELIX_RADIUS = 1.5, np.deg2rad(100.0), 2.3
STRAND_RISE = 3.3
STRAND_PLEAT = 0.5 * np.sqrt(CA_STEP**2 - STRAND_RISE**2)
SHEET_SPACING = 4.8  # strand-strand axis distance
HELIX_SPACING = 9.0  # helix-helix / helix-strand axis distance

# residue preference groups per SS class; together they partition the alphabet
SS_RESIDUES = {
    "H": "AELMQKRH",
    "E": "VIYFWTC",
    "C": "GPNDS",
}

N_GEOM_FEATURES_PER_NEIGHBOR = 4
N_LOCAL_SHAPE_FEATURES = 8
NONLOCAL_MIN_SEPARATION = 5


@dataclass
class GeneratorConfig:
    n_proteins: int = 256
    length_range: Tuple[int, int] = (32, 64)
    helix_fraction: float = 0.4
    strand_fraction: float = 0.4
    seq_structure_coupling: float = 0.8
    noise_fraction: float = 0.0
    coord_noise_sigma: float = 2.0
    embed_dim: int = 16
    k_neighbors: int = 8
    embed_seed: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        self.length_range = tuple(int(x) for x in self.length_range)
        lo, hi = self.length_range
        if lo < 8 or hi < lo:
            raise ValueError(f"length_range must satisfy 8 <= min <= max, got {self.length_range}")
        for name in ("helix_fraction", "strand_fraction", "seq_structure_coupling", "noise_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.helix_fraction + self.strand_fraction > 1.0:
            raise ValueError("helix_fraction + strand_fraction must not exceed 1")
        if self.coord_noise_sigma < 0:
            raise ValueError("coord_noise_sigma must be >= 0")


def residue_distribution(ss: str, coupling: float) -> np.ndarray:
    """q(residue | ss): uniform background mixed with the class's preference group."""
    p = np.full(len(ALPHABET), (1.0 - coupling) / len(ALPHABET))
    group = SS_RESIDUES[ss]
    for a in group:
        p[AA_TO_ID[a]] += coupling / len(group)
    return p


def substitution_fitness(record: ProteinRecord, mutations: Sequence[Tuple[int, str]],
                         coupling: float) -> float:
    """Structure compatibility of substitutions: summed log q(mut|ss) - log q(wt|ss)."""
    if record.ss_labels is None:
        raise ValueError(f"record {record.id} has no SS labels")
    total = 0.0
    for pos, new in mutations:
        p = residue_distribution(record.ss_labels[pos], coupling)
        total += np.log(p[AA_TO_ID[new]]) - np.log(p[AA_TO_ID[record.sequence[pos]]])
    return float(total)


# ---------------------------------------------------------------------------
# geometry

def ideal_helix(n: int, phase: float = 0.0) -> np.ndarray:
    """Ideal helix CA trace around the local z axis."""
    k = np.arange(n)
    return np.stack([HELIX_RADIUS * np.cos(HELIX_TURN * k + phase),
                     HELIX_RADIUS * np.sin(HELIX_TURN * k + phase),
                     HELIX_RISE * k], axis=1)


def ideal_strand(n: int) -> np.ndarray:
    """Pleated strand CA trace along the local z axis."""
    k = np.arange(n)
    pleat = STRAND_PLEAT * np.where(k % 2 == 0, 1.0, -1.0)
    return np.stack([pleat, np.zeros(n), STRAND_RISE * k], axis=1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _orthonormal_frame(u: np.ndarray, v_hint: np.ndarray) -> np.ndarray:
    u = _unit(u)
    v = v_hint - np.dot(v_hint, u) * u
    v = _unit(v)
    w = np.cross(v, u)
    return np.stack([w, v, u], axis=1)  # local x -> w, y -> v, z -> u


def _coil_walk(start: np.ndarray, target: np.ndarray, n: int, existing: np.ndarray,
               rng: np.random.Generator, bias: float = 0.6, min_dist: float = 3.6) -> np.ndarray:
    """Self-avoiding walk of ``n`` CA_STEP steps, loosely drawn toward ``target``."""
    pts = []
    cur = start
    others = existing
    for _ in range(n):
        best, best_clear = None, -1.0
        for _attempt in range(40):
            to_target = target - cur
            dist = np.linalg.norm(to_target)
            drift = to_target / dist if dist > 1e-9 else np.zeros(3)
            step = _unit(bias * drift + (1.0 - bias) * _unit(rng.normal(size=3)) + 1e-12)
            cand = cur + CA_STEP * step
            clear = np.min(np.linalg.norm(others[:-1] - cand, axis=1)) if len(others) > 1 else np.inf
            if clear >= min_dist:
                best = cand
                break
            if clear > best_clear:
                best, best_clear = cand, clear
        pts.append(best)
        others = np.vstack([others, best[None]])
        cur = best
    return np.asarray(pts).reshape(n, 3)


def _segment_plan(L: int, cfg: GeneratorConfig, rng: np.random.Generator) -> List[Tuple[str, int]]:
    plan: List[Tuple[str, int]] = []
    total = 0
    lead = int(rng.integers(1, 4))
    plan.append(("C", lead))
    total += lead
    while total < L:
        u = rng.random()
        if u < cfg.helix_fraction:
            seg = ("H", int(rng.integers(8, 15)))
        elif u < cfg.helix_fraction + cfg.strand_fraction:
            seg = ("E", int(rng.integers(4, 9)))
        else:
            seg = ("L", int(rng.integers(4, 8)))  # long loop, labelled coil
        plan.append(seg)
        total += seg[1]
        turn = int(rng.integers(2, 5))
        plan.append(("C", turn))
        total += turn
    # trim to exactly L residues
    out, acc = [], 0
    for kind, n in plan:
        take = min(n, L - acc)
        if take > 0:
            out.append((kind, take))
            acc += take
    return out


def _bridge_arc(p: np.ndarray, q: np.ndarray, n: int, bulge: np.ndarray) -> np.ndarray:
    """``n`` points on a circular arc from ``p`` to ``q`` with all n+1 chords equal to CA_STEP."""
    chord = q - p
    D = np.linalg.norm(chord)
    e = chord / D
    b = bulge - np.dot(bulge, e) * e
    b = _unit(b) if np.linalg.norm(b) > 1e-9 else _orthonormal_frame(e, np.array([1.0, 0.3, 0.1]))[:, 0]
    m = n + 1
    if m * CA_STEP <= D:
        raise ValueError(f"cannot bridge {D:.2f} A with {n} residues")

    def gap(phi: float) -> float:
        return CA_STEP * np.sin(m * phi / 2) / np.sin(phi / 2) - D

    lo, hi = 1e-9, 2 * np.pi / m
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
    phi = 0.5 * (lo + hi)
    R = CA_STEP / (2 * np.sin(phi / 2))
    theta = m * phi
    center = 0.5 * (p + q) - R * np.cos(theta / 2) * b
    alphas = -theta / 2 + phi * np.arange(1, n + 1)
    return center + R * (np.sin(alphas)[:, None] * e + np.cos(alphas)[:, None] * b)


def _merge_coils(plan: Sequence[Tuple[str, int]]) -> List[Tuple[str, int]]:
    out: List[Tuple[str, int]] = []
    for kind, n in plan:
        kind = "C" if kind in ("C", "L") else kind
        if out and out[-1][0] == "C" and kind == "C":
            out[-1] = ("C", out[-1][1] + n)
        else:
            out.append((kind, n))
    return out


def build_backbone(plan: Sequence[Tuple[str, int]], rng: np.random.Generator,
                   min_clearance: float = 3.0, max_attempts: int = 25) -> Tuple[np.ndarray, str]:
    """Meander backbone, rebuilt with fresh loop noise until no non-adjacent pair clashes."""
    best, best_clear = None, -1.0
    for _ in range(max_attempts):
        coords, ss = _build_meander(plan, rng)
        d = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
        iu = np.triu_indices(len(coords), 2)
        clear = d[iu].min() if len(iu[0]) else np.inf
        if clear >= min_clearance:
            return coords, ss
        if clear > best_clear:
            best, best_clear = (coords, ss), clear
    return best


def _build_meander(plan: Sequence[Tuple[str, int]], rng: np.random.Generator) -> Tuple[np.ndarray, str]:
    """Meander backbone for a segment plan; returns coordinates and per-residue SS string.

    Consecutive helices/strands run antiparallel, each shifted sideways from
    the previous one; loops between them are arcs bulging away from the sheet.
    """
    segs = _merge_coils(plan)
    sse_idx = [k for k, (kind, _) in enumerate(segs) if kind != "C"]
    if not sse_idx:
        n = sum(n for _, n in segs)
        pts = _coil_walk(np.zeros(3), np.zeros(3), n, np.zeros((1, 3)), rng, bias=0.0)
        return pts, "C" * n

    axis = np.array([0.0, 0.0, 1.0])
    lateral = np.array([0.0, 1.0, 0.0])
    placed = {}
    prev = None
    for k in sse_idx:
        kind, n = segs[k]
        local = ideal_helix(n, phase=rng.uniform(0, 2 * np.pi)) if kind == "H" else ideal_strand(n)
        if prev is None:
            origin = np.zeros(3)
        else:
            pk, p_end = prev
            gap_n = sum(segs[j][1] for j in range(pk + 1, k))
            spacing = SHEET_SPACING if (segs[pk][0] == "E" and kind == "E") else HELIX_SPACING
            axis = _unit(-axis + 0.03 * rng.normal(size=3))
            lateral = _unit(lateral - np.dot(lateral, axis) * axis)
            origin = p_end + spacing * lateral + 0.2 * rng.normal(size=3)
        frame = _orthonormal_frame(axis, lateral)
        pts = local @ frame.T + origin
        if prev is not None:
            # the loop must be able to span the gap between consecutive elements
            reach = 0.95 * (gap_n + 1) * CA_STEP
            gap = np.linalg.norm(pts[0] - placed[pk][-1])
            if gap > reach:
                pull = placed[pk][-1] - pts[0]
                pts = pts + pull * (1.0 - reach / gap)
        placed[k] = pts
        # axis point level with the last residue
        prev = (k, pts[-1] - frame @ np.array([local[-1, 0], local[-1, 1], 0.0]))

    pieces = []
    for k, (kind, n) in enumerate(segs):
        if kind != "C":
            pieces.append(placed[k])
            continue
        before = [j for j in sse_idx if j < k]
        after = [j for j in sse_idx if j > k]
        if before and after:
            p, q = placed[before[-1]][-1], placed[after[0]][0]
            # bulge beyond the end of the preceding element, away from the sheet
            out_dir = placed[before[-1]][-1] - placed[before[-1]][0]
            bulge = _unit(out_dir) + 0.4 * rng.normal(size=3)
            pieces.append(_bridge_arc(p, q, n, bulge))
        elif after:
            first = placed[after[0]]
            back = _unit(first[0] - first[-1])
            walk = _coil_walk(first[0], first[0] + 4 * n * CA_STEP * back, n, first[::-1], rng, bias=0.5)
            pieces.append(walk[::-1])
        else:
            last = placed[before[-1]]
            fwd = _unit(last[-1] - last[0])
            existing = np.vstack([pc for pc in pieces])
            pieces.append(_coil_walk(last[-1], last[-1] + 4 * n * CA_STEP * fwd, n, existing, rng, bias=0.5))
    coords = np.vstack(pieces)
    ss = "".join(("C" if kind == "C" else kind) * n for kind, n in segs)
    return coords, ss


def contacts(coords: np.ndarray, threshold: float = 8.0, min_separation: int = 6) -> Set[Tuple[int, int]]:
    """Unordered pairs i < j with j - i > min_separation and CA distance <= threshold."""
    cmap = contact_map(coords, threshold, min_separation)
    i, j = np.nonzero(np.triu(cmap))
    return set(zip(i.tolist(), j.tolist()))


def contact_map(coords: np.ndarray, threshold: float = 8.0, min_separation: int = 6) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    L = len(coords)
    if L < 2:
        raise ValueError("need at least 2 residues")
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    idx = np.arange(L)
    sep = np.abs(idx[:, None] - idx[None, :])
    return (d <= threshold) & (sep > min_separation)


def _tangents(coords: np.ndarray) -> np.ndarray:
    L = len(coords)
    t = np.empty_like(coords)
    t[1:-1] = coords[2:] - coords[:-2]
    t[0] = coords[1] - coords[0]
    t[-1] = coords[-1] - coords[-2]
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def _bend_and_torsion(coords: np.ndarray) -> np.ndarray:
    L = len(coords)
    out = np.zeros((L, 3))
    for i in range(L):
        a, b = max(i - 1, 0), min(i + 1, L - 1)
        if b - a == 2:
            u1, u2 = coords[i] - coords[a], coords[b] - coords[i]
            out[i, 0] = np.dot(u1, u2) / (np.linalg.norm(u1) * np.linalg.norm(u2))
        else:
            out[i, 0] = 1.0
        lo, hi = i - 1, i + 2
        if lo < 0:
            lo, hi = 0, 3
        if hi > L - 1:
            lo, hi = L - 4, L - 1
        if lo < 0:
            continue
        p0, p1, p2, p3 = coords[lo], coords[lo + 1], coords[lo + 2], coords[hi]
        b0, b1, b2 = p1 - p0, p2 - p1, p3 - p2
        n1, n2 = np.cross(b0, b1), np.cross(b1, b2)
        if np.linalg.norm(n1) < 1e-9 or np.linalg.norm(n2) < 1e-9:
            continue
        m1 = np.cross(n1, b1 / np.linalg.norm(b1))
        x, y = np.dot(n1, n2), np.dot(m1, n2)
        phi = np.arctan2(y, x)
        out[i, 1], out[i, 2] = np.cos(phi), np.sin(phi)
    return out


def _span_distances(d: np.ndarray, offsets: Sequence[int] = (2, 3, 4)) -> np.ndarray:
    """Mean CA distance to i-k and i+k for each offset k (one side at chain ends)."""
    L = len(d)
    out = np.empty((L, len(offsets)))
    for col, k in enumerate(offsets):
        total, count = np.zeros(L), np.zeros(L)
        if k < L:
            fwd = d[np.arange(L - k), np.arange(k, L)]
            total[: L - k] += fwd
            count[: L - k] += 1
            total[k:] += fwd
            count[k:] += 1
        # a chain too short for the offset counts as fully extended
        out[:, col] = np.where(count > 0, total / np.maximum(count, 1), k * CA_STEP)
    return out


def _smooth_along_chain(f: np.ndarray) -> np.ndarray:
    """Mean over residues i-1, i, i+1: one round of message passing along the chain."""
    total = f.copy()
    total[1:] += f[:-1]
    total[:-1] += f[1:]
    count = np.full(len(f), 3.0)
    count[0] = count[-1] = 2.0
    if len(f) == 1:
        count[0] = 1.0
    return total / count[:, None]


def geometry_features(coords: np.ndarray, k_neighbors: int = 8) -> np.ndarray:
    """Rotation/translation-invariant per-residue features of the local neighborhood.

    Columns are a per-neighbour block (distance, sequence offset, direction and
    tangent alignment for each of the k nearest residues) followed by a local
    shape block of N_LOCAL_SHAPE_FEATURES: bend, torsion cos/sin, span
    distances at offsets 2, 3 and 4, nearest non-local distance and the 8 A
    neighbour count, averaged over each residue and its chain neighbours.
    """
    coords = np.asarray(coords, dtype=np.float64)
    L = len(coords)
    if L < k_neighbors + 1:
        raise ValueError(f"need L >= k_neighbors + 1 ({k_neighbors + 1}), got {L}")
    diff = coords[None, :, :] - coords[:, None, :]  # diff[i, j] = x_j - x_i
    d = np.linalg.norm(diff, axis=-1)
    off_diag = d[~np.eye(L, dtype=bool)]
    if (off_diag < 1e-6).any():
        raise ValueError("degenerate geometry: coincident residues")
    t = _tangents(coords)
    idx = np.arange(L)
    base = k_neighbors * N_GEOM_FEATURES_PER_NEIGHBOR
    feats = np.zeros((L, base + N_LOCAL_SHAPE_FEATURES))
    for i in range(L):
        others = idx[idx != i]
        # rounding makes tie-breaking by sequence offset robust to rigid motion
        order = np.lexsort((others - i, np.round(d[i, others], 6)))
        nb = others[order[:k_neighbors]]
        dirs = diff[i, nb] / d[i, nb, None]
        block = np.stack([
            d[i, nb] / 10.0,
            np.tanh((nb - i) / 10.0),
            dirs @ t[i],
            t[nb] @ t[i],
        ], axis=1)
        feats[i, : block.size] = block.reshape(-1)
    far = np.abs(idx[:, None] - idx[None, :]) >= NONLOCAL_MIN_SEPARATION
    nonlocal_min = np.where(far, d, np.inf).min(axis=1)
    local = np.concatenate([
        _bend_and_torsion(coords),
        _span_distances(d) / 10.0,
        np.minimum(nonlocal_min, 20.0)[:, None] / 10.0,
        ((d <= 8.0).sum(1, keepdims=True) - 1) / 10.0,
    ], axis=1)
    feats[:, base:] = _smooth_along_chain(local)
    return feats


def projection_matrix(n_neighbor: int, n_local: int, D_g: int, seed: int = 0) -> np.ndarray:
    """Fixed seeded random projection of [neighbour block, local shape block] to D_g.

    Each block gets its own Gaussian projection into a disjoint set of
    output dims, so the few local shape features are not drowned by the
    neighbour block; a random rotation then mixes all dims.
    """
    rng = np.random.default_rng([seed, n_neighbor, n_local, D_g])
    d_local = min(n_local, D_g // 2)
    d_neighbor = D_g - d_local
    W = np.zeros((n_neighbor + n_local, D_g))
    W[:n_neighbor, :d_neighbor] = rng.normal(size=(n_neighbor, d_neighbor)) / np.sqrt(n_neighbor)
    W[n_neighbor:, d_neighbor:] = rng.normal(size=(n_local, d_local)) / np.sqrt(n_local)
    rotation, _ = np.linalg.qr(rng.normal(size=(D_g, D_g)))
    return W @ rotation


def surrogate_gnn_embed(coords: np.ndarray, k_neighbors: int = 8, D_g: int = 16, seed: int = 0) -> np.ndarray:
    """Frozen structure embedding: invariant geometry features under a fixed random projection."""
    feats = geometry_features(coords, k_neighbors)
    n_neighbor = k_neighbors * N_GEOM_FEATURES_PER_NEIGHBOR
    return feats @ projection_matrix(n_neighbor, N_LOCAL_SHAPE_FEATURES, D_g, seed)


def corrupt(record: ProteinRecord, coord_noise_sigma: float = 2.0, seed: int = 0,
            k_neighbors: int = 8, embed_seed: int = 0, codebook=None) -> ProteinRecord:
    """Gaussian coordinate noise plus quality metadata outside the reference thresholds."""
    if coord_noise_sigma < 0:
        raise ValueError("coord_noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    noise = rng.normal(scale=coord_noise_sigma, size=record.coords.shape)
    resolution = float(rng.uniform(2.5, 4.0))
    r_free = float(rng.uniform(0.25, 0.35))
    if coord_noise_sigma == 0:
        return replace(record, resolution=resolution, r_free=r_free, corrupted=True)
    coords = record.coords + noise
    emb = None
    if record.gnn_embedding is not None:
        emb = surrogate_gnn_embed(coords, k_neighbors, record.gnn_embedding.shape[1], embed_seed)
    tokens = None
    if codebook is not None:
        from .tokenizer import tokenize
        tokens = tokenize(coords, codebook)
    return replace(record, coords=coords, gnn_embedding=emb, structure_tokens=tokens,
                   resolution=resolution, r_free=r_free, corrupted=True)


def generate(config: GeneratorConfig) -> List[ProteinRecord]:
    """Deterministic synthetic corpus; a ``noise_fraction`` share of records is corrupted."""
    rng = np.random.default_rng(config.seed)
    lo, hi = config.length_range
    n_noisy = int(round(config.noise_fraction * config.n_proteins))
    noisy = set(rng.choice(config.n_proteins, size=n_noisy, replace=False).tolist()) if n_noisy else set()
    records = []
    for p in range(config.n_proteins):
        prng = np.random.default_rng([config.seed, p])
        L = int(prng.integers(lo, hi + 1))
        plan = _segment_plan(L, config, prng)
        coords, ss = build_backbone(plan, prng)
        coords = coords @ random_rotation(prng).T + prng.normal(scale=5.0, size=3)
        seq = "".join(
            ALPHABET[prng.choice(len(ALPHABET), p=residue_distribution(s, config.seq_structure_coupling))]
            for s in ss
        )
        rec = ProteinRecord(
            id=f"syn{config.seed}_{p:05d}",
            sequence=seq,
            coords=coords,
            gnn_embedding=surrogate_gnn_embed(coords, config.k_neighbors, config.embed_dim, config.embed_seed),
            resolution=float(prng.uniform(1.0, 1.95)),
            r_free=float(prng.uniform(0.12, 0.195)),
            ss_labels=ss,
        )
        if p in noisy:
            rec = corrupt(rec, config.coord_noise_sigma, seed=int(prng.integers(2**31)),
                          k_neighbors=config.k_neighbors, embed_seed=config.embed_seed)
        records.append(rec)
    return records
