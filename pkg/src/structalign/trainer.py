"""Reference-model training, the alignment loop, and ablation grids."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .corpus import (
    ProteinRecord,
    curate_reference,
    make_batches,
    split_train_val,
)
from .losses import FAMILIES, LossWeights, combine, residue_losses
from .model import FrozenModelError, ModelBundle, PlmConfig, load_checkpoint, save_checkpoint
from .nn import AdamW, Schedule, clip_grad_norm
from .selection import SelectionAudit, SelectionStrategy, reference_losses, selection_masks
from .synthgen import surrogate_gnn_embed
from .tokenizer import Codebook, fit_corpus_codebook, tokenize

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, step: int, checkpoint: Optional[Path]):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")


@dataclass
class TrainConfig:
    epochs: int = 20
    warmup_epochs: float = 2
    peak_lr_backbone: float = 1e-4
    peak_lr_heads: float = 1e-3
    rho: float = 0.8
    gamma_latent: float = 0.5
    gamma_physical: float = 0.5
    strategy: str = "excess"
    seed: int = 0
    batch_size: int = 16
    max_len: int = 64
    mask_rate: float = 0.15
    val_fraction: float = 0.1
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    clip_norm: Optional[float] = None
    selection_enabled: bool = True
    audit: bool = False
    # reference model training length; None means the same as ``epochs``
    reference_epochs: Optional[int] = None
    # re-initialize structure head, projections and scale when starting from an init model
    fresh_heads: bool = True
    # architecture of the main model; the reference model halves depth and width
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    proj_dim: int = 32
    # feature preparation when a corpus lacks embeddings or tokens
    codebook_size: int = 20
    embed_dim: int = 16
    k_neighbors: int = 8

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if not 0 < self.warmup_epochs < self.epochs:
            raise ValueError(f"need 0 < warmup_epochs < epochs, got {self.warmup_epochs}, {self.epochs}")
        if self.peak_lr_backbone <= 0 or self.peak_lr_heads <= 0:
            raise ValueError("learning rates must be > 0")
        SelectionStrategy.make(self.strategy, self.rho)
        LossWeights(self.gamma_latent, self.gamma_physical)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.gamma_latent, self.gamma_physical)

    @property
    def selection(self) -> SelectionStrategy:
        return SelectionStrategy.make(self.strategy, self.rho)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def updated(self, **overrides: Any) -> "TrainConfig":
        return self.from_json({**self.to_json(), **overrides})


def plm_config(config: TrainConfig, gnn_dim: int, n_struct_tokens: int) -> PlmConfig:
    return PlmConfig(d_model=config.d_model, n_layers=config.n_layers, n_heads=config.n_heads,
                     max_len=config.max_len, proj_dim=config.proj_dim, gnn_dim=gnn_dim,
                     n_struct_tokens=n_struct_tokens)


def prepare_corpus(records: Sequence[ProteinRecord], config: TrainConfig,
                   codebook: Optional[Codebook] = None) -> Tuple[List[ProteinRecord], Optional[Codebook]]:
    """Fill in missing structure embeddings and tokens.

    Tokens come from ``codebook`` when given; otherwise a codebook of
    ``config.codebook_size`` is fit on these records.
    """
    out = []
    for rec in records:
        if rec.gnn_embedding is None:
            rec = replace(rec, gnn_embedding=surrogate_gnn_embed(rec.coords, config.k_neighbors, config.embed_dim))
        out.append(rec)
    if codebook is not None:
        out = [replace(r, structure_tokens=tokenize(r.coords, codebook)) for r in out]
    elif any(r.structure_tokens is None for r in out):
        codebook = fit_corpus_codebook(out, config.codebook_size, config.seed)
        out = [replace(r, structure_tokens=tokenize(r.coords, codebook)) for r in out]
    dims = {r.gnn_embedding.shape[1] for r in out}
    if len(dims) > 1:
        raise ValueError(f"inconsistent structure embedding widths {sorted(dims)}")
    return out, codebook


def _corpus_dims(records: Sequence[ProteinRecord], codebook: Optional[Codebook], fallback_k: int) -> Tuple[int, int]:
    gnn_dim = records[0].gnn_embedding.shape[1]
    if codebook is not None:
        return gnn_dim, codebook.K
    top = max(int(r.structure_tokens.max()) for r in records) + 1
    return gnn_dim, max(fallback_k, top)


# ---------------------------------------------------------------------------
# evaluation of the training objective

def evaluate_losses(bundle: ModelBundle, records: Sequence[ProteinRecord], config: TrainConfig,
                    epoch: int) -> Dict[str, float]:
    """Unselected validation losses; batches and masks depend only on (seed, epoch)."""
    if not records:
        return {}
    batches = make_batches(records, config.batch_size, config.max_len,
                           seed=[config.seed, 104729, epoch], mask_rate=config.mask_rate)
    sums = {f: 0.0 for f in FAMILIES}
    mlm_sum, n_mlm, n_res = 0.0, 0, 0
    with torch.no_grad():
        for batch in batches:
            fwd = residue_losses(bundle, batch)
            mlm_sum += float(fwd.mlm_per_position.sum())
            n_mlm += len(fwd.mlm_per_position)
            for f in FAMILIES:
                sums[f] += float(fwd.residues.family(f).sum())
            n_res += len(fwd.residues)
    out = {f: sums[f] / n_res for f in FAMILIES}
    out["mlm"] = mlm_sum / n_mlm
    out["latent"] = 0.5 * (out["a2g"] + out["g2a"])
    w = config.weights
    out["overall"] = out["mlm"] + w.latent * out["latent"] + w.physical * out["physical"]
    return out


# ---------------------------------------------------------------------------
# training

@dataclass
class AlignResult:
    bundle: ModelBundle
    history: List[Dict[str, Any]] = field(default_factory=list)
    codebook: Optional[Codebook] = None
    run_dir: Optional[Path] = None


def _jsonable(x: Any) -> Any:
    if isinstance(x, torch.Tensor):
        return float(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    return x


class _RunFiles:
    def __init__(self, run_dir: Optional[Path]):
        self.run_dir = run_dir
        if run_dir is None:
            return
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "logs").mkdir(parents=True, exist_ok=True)

    @property
    def metrics(self) -> Optional[Path]:
        return None if self.run_dir is None else self.run_dir / "logs" / "metrics.jsonl"

    def ckpt(self, name: str) -> Optional[Path]:
        return None if self.run_dir is None else self.run_dir / "checkpoints" / f"{name}.pt"


def _write_curves(path: Path, history: Sequence[Dict[str, Any]]) -> None:
    keys = ["mlm", "a2g", "g2a", "latent", "physical", "overall"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"train_{k}" for k in keys] + [f"val_{k}" for k in keys])
        for h in history:
            w.writerow([h["epoch"]] + [repr(h["train"].get(k, float("nan"))) for k in keys]
                       + [repr(h["val"].get(k, float("nan"))) for k in keys])


def align(
    init: Optional[ModelBundle],
    corpus: Sequence[ProteinRecord],
    reference: Optional[ModelBundle],
    config: TrainConfig,
    run_dir: str | Path | None = None,
    val_records: Optional[Sequence[ProteinRecord]] = None,
    codebook: Optional[Codebook] = None,
    resume: bool = False,
    stop_after_epoch: Optional[int] = None,
) -> AlignResult:
    """Train ``init`` (or a fresh model) on the overall objective with residue selection.

    Records without embeddings/tokens are featurized first. If ``val_records``
    is None a seeded ``config.val_fraction`` split is held out. With ``resume``
    the run continues from ``run_dir/checkpoints/last.pt``.
    """
    strategy = config.selection
    weights = config.weights
    # selection only touches the structural terms; with both weighted 0 it cannot change the loss
    use_selection = config.selection_enabled and (weights.latent > 0 or weights.physical > 0)
    if use_selection and strategy.needs_reference and reference is None:
        raise ValueError("strategy 'excess' needs a reference model")
    if val_records is None:
        train, val = split_train_val(corpus, config.val_fraction, config.seed)
    else:
        train, val = list(corpus), list(val_records)
    if not train:
        raise ValueError("empty training corpus")
    train, codebook = prepare_corpus(train, config, codebook)
    if val:
        val, _ = prepare_corpus(val, config, codebook)
    gnn_dim, K = _corpus_dims(train, codebook, config.codebook_size)

    run_dir = Path(run_dir) if run_dir is not None else None
    files = _RunFiles(run_dir)
    if run_dir is not None:
        (run_dir / "config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))
        if codebook is not None:
            codebook.save(run_dir / "codebook.json")

    if init is None:
        bundle = ModelBundle(plm_config(config, gnn_dim, K), seed=config.seed)
    else:
        if init.frozen:
            raise FrozenModelError("cannot align a frozen model")
        bundle = copy.deepcopy(init)
        if bundle.config.gnn_dim != gnn_dim or bundle.config.n_struct_tokens != K:
            raise ValueError(
                f"init model expects D_g={bundle.config.gnn_dim}, K={bundle.config.n_struct_tokens}; "
                f"corpus has D_g={gnn_dim}, K={K}"
            )
        if config.fresh_heads and not resume:
            bundle.reset_alignment_heads(config.seed)
    if reference is not None:
        reference.eval()

    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = min(max(1, round(config.warmup_epochs * steps_per_epoch)), total_steps - 1)
    if warmup_steps < 1:
        raise ValueError("a run needs at least 2 optimizer steps")
    schedule = Schedule(warmup_steps, total_steps)
    groups = bundle.param_groups(config.peak_lr_backbone, config.peak_lr_heads, config.weight_decay)
    opt = AdamW(groups, schedule, config.betas, config.eps)
    all_params = [p for g in groups for p in g.params]

    history: List[Dict[str, Any]] = []
    start_epoch = 0
    best_val = math.inf
    if resume:
        if run_dir is None:
            raise ValueError("resume needs a run directory")
        loaded, payload = load_checkpoint(files.ckpt("last"))
        bundle.load_state_dict(loaded.state_dict())
        opt.load_state_dict(payload["optimizer"])
        torch.set_rng_state(payload["rng"]["torch"])
        extra = payload["extra"]
        start_epoch = extra["epoch"]
        history = extra["history"]
        best_val = extra["best_val"]
        # drop log lines written after the checkpoint so the log matches an uninterrupted run
        lines = files.metrics.read_text().splitlines(keepends=True)[: extra["metric_lines"]]
        files.metrics.write_text("".join(lines))
    elif files.metrics is not None:
        files.metrics.write_text("")

    def log(obj: Dict[str, Any]) -> None:
        if files.metrics is not None:
            with open(files.metrics, "a") as fh:
                fh.write(json.dumps(_jsonable(obj)) + "\n")

    def checkpoint(name: str, epoch: int) -> Optional[Path]:
        path = files.ckpt(name)
        if path is None:
            return None
        n_lines = len(files.metrics.read_text().splitlines())
        save_checkpoint(path, bundle, opt.state_dict(), opt.step_count,
                        extra={"epoch": epoch, "history": history, "best_val": best_val,
                               "metric_lines": n_lines, "config": config.to_json()})
        return path

    last_good = files.ckpt("last")
    if not resume:
        last_good = checkpoint("last", 0)

    audit = SelectionAudit(run_dir / "logs" / "selection_audit.csv") if (config.audit and run_dir) else None
    bundle.train()
    try:
        for epoch in range(start_epoch, config.epochs):
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break
            batches = make_batches(train, config.batch_size, config.max_len,
                                   seed=[config.seed, epoch], mask_rate=config.mask_rate)
            train_sums = {k: 0.0 for k in ("mlm", "a2g", "g2a", "latent", "physical", "overall")}
            for batch in batches:
                fwd = residue_losses(bundle, batch)
                ref = None
                masks = None
                if use_selection:
                    if strategy.needs_reference:
                        ref = reference_losses(reference, batch, bundle.config)
                    masks = selection_masks(fwd.residues, strategy, ref)
                loss, parts = combine(fwd.mlm, fwd.residues, weights, masks)
                step = opt.step_count + 1
                if not torch.isfinite(loss):
                    raise NumericalError(step, last_good)
                opt.zero_grad()
                loss.backward()
                if config.clip_norm is not None:
                    clip_grad_norm(all_params, config.clip_norm)
                opt.step()
                if audit is not None and masks is not None:
                    audit.record(step, fwd.residues, ref, masks)
                lrs = opt.current_lrs()
                entry = {"kind": "step", "step": step, "epoch": epoch + 1,
                         "lr": lrs["backbone"], "lr_heads": lrs["heads"]}
                entry.update({k: float(v.detach()) for k, v in parts.items()})
                n = len(fwd.residues)
                entry["selected"] = {f: (int(masks[f].sum()) if masks else n) for f in FAMILIES}
                entry["n_residues"] = n
                log(entry)
                for k in train_sums:
                    train_sums[k] += float(parts[k].detach())
            train_means = {k: v / len(batches) for k, v in train_sums.items()}
            bundle.eval()
            val_losses = evaluate_losses(bundle, val, config, epoch + 1)
            bundle.train()
            record = {"epoch": epoch + 1, "train": train_means, "val": val_losses}
            history.append(record)
            log({"kind": "epoch", **record})
            if val_losses and val_losses["overall"] < best_val:
                best_val = val_losses["overall"]
                checkpoint("best", epoch + 1)
            last_good = checkpoint("last", epoch + 1)
    finally:
        if audit is not None:
            audit.close()
    bundle.eval()
    if run_dir is not None and len(history) == config.epochs:
        checkpoint("final", config.epochs)
        _write_curves(run_dir / "curves.csv", history)
    return AlignResult(bundle, history, codebook, run_dir)


def train_reference(
    reference_corpus: Sequence[ProteinRecord],
    config: TrainConfig,
    run_dir: str | Path | None = None,
    codebook: Optional[Codebook] = None,
    val_records: Optional[Sequence[ProteinRecord]] = None,
) -> AlignResult:
    """Smaller model trained on curated records with the same objective and no selection; returned frozen."""
    if not reference_corpus:
        raise ValueError("reference corpus is empty")
    ref_config = config.updated(strategy="full", rho=1.0,
                                epochs=config.reference_epochs or config.epochs,
                                d_model=plm_config(config, 1, 2).smaller().d_model,
                                n_layers=plm_config(config, 1, 2).smaller().n_layers,
                                n_heads=plm_config(config, 1, 2).smaller().n_heads)
    result = align(None, reference_corpus, None, ref_config, run_dir=run_dir,
                   val_records=val_records, codebook=codebook)
    result.bundle.freeze()
    if run_dir is not None:
        save_checkpoint(Path(run_dir) / "checkpoints" / "reference.pt", result.bundle,
                        step=len(result.history), extra={"config": ref_config.to_json()})
    return result


def pretrain_base(
    corpus: Sequence[ProteinRecord],
    config: TrainConfig,
    run_dir: str | Path | None = None,
    codebook: Optional[Codebook] = None,
    val_records: Optional[Sequence[ProteinRecord]] = None,
) -> AlignResult:
    """MLM-only model from scratch: the sequence-only pLM that alignment post-trains."""
    base_config = config.updated(strategy="full", rho=1.0, gamma_latent=0.0, gamma_physical=0.0)
    return align(None, corpus, None, base_config, run_dir=run_dir, val_records=val_records, codebook=codebook)


# ---------------------------------------------------------------------------
# ablation grids

def expand_grid(spec: Dict[str, Any]) -> List[Dict[str, Any]]:
    """Cells from ``{"cells": [...]}`` or a cartesian product of ``{"axes": {...}}``.

    A bare mapping of lists is read as axes.
    """
    if not spec:
        raise ValueError("empty grid spec")
    if "cells" in spec:
        cells = [dict(c) for c in spec["cells"]]
    else:
        axes = spec.get("axes", {k: v for k, v in spec.items() if k not in ("base", "probe")})
        if not axes:
            raise ValueError("grid spec has no axes")
        keys = list(axes)
        cells = [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]
    if not cells:
        raise ValueError("grid spec expands to no cells")
    for c in cells:
        c.setdefault("name", ",".join(f"{k}={v}" for k, v in c.items()))
    return cells


def _cell_overrides(cell: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for k, v in cell.items():
        if k == "name":
            continue
        if k == "K":
            out["codebook_size"] = int(v)
        elif k == "gamma":
            out["gamma_latent"], out["gamma_physical"] = float(v[0]), float(v[1])
        else:
            out[k] = v
    return out


def run_ablation_grid(
    train: Sequence[ProteinRecord],
    val: Sequence[ProteinRecord],
    grid: Dict[str, Any],
    base_config: TrainConfig,
    out_dir: str | Path | None = None,
    init: Optional[ModelBundle] = None,
    probe_config=None,
    probes: Sequence[str] = ("contact", "ss", "ppl", "zero_shot"),
    keep_models: bool = False,
    coupling: Optional[float] = None,
) -> List[Dict[str, Any]]:
    """Align one model per grid cell and report final validation losses plus probe metrics.

    Codebooks are fit once per K and reference models once per (K, seed).
    Zero-shot scoring needs the generator ``coupling`` of the corpus.
    """
    from .evaluation import ProbeConfig, run_probes

    cells = expand_grid(grid)
    probe_config = probe_config or ProbeConfig()
    out_dir = Path(out_dir) if out_dir is not None else None
    codebooks: Dict[Tuple[int, int], Codebook] = {}
    references: Dict[Tuple[int, int], ModelBundle] = {}
    rows = []
    for idx, cell in enumerate(cells):
        cfg = base_config.updated(**_cell_overrides(cell))
        key = (cfg.codebook_size, cfg.seed)
        if key not in codebooks:
            codebooks[key] = fit_corpus_codebook(list(train), cfg.codebook_size, cfg.seed)
        cb = codebooks[key]
        tr, _ = prepare_corpus(train, cfg, cb)
        va, _ = prepare_corpus(val, cfg, cb)
        ref = None
        if cfg.selection_enabled and cfg.selection.needs_reference and (cfg.gamma_latent or cfg.gamma_physical):
            if key not in references:
                curated = curate_reference(tr)
                references[key] = train_reference(curated, cfg, codebook=cb, val_records=[]).bundle
            ref = references[key]
        cell_init = None
        if init is not None:
            cell_init = copy.deepcopy(init)
            if cell_init.config.n_struct_tokens != cb.K:
                cell_init = _resize_struct_head(cell_init, cb.K, cfg.seed)
        run_dir = out_dir / "runs" / f"{idx:03d}" if out_dir is not None else None
        logger.info("grid cell %d/%d: %s", idx + 1, len(cells), cell["name"])
        result = align(cell_init, tr, ref, cfg, run_dir=run_dir, val_records=va, codebook=cb)
        row: Dict[str, Any] = {"cell": idx, "name": cell["name"], **{k: v for k, v in cell.items() if k != "name"}}
        final = result.history[-1]["val"] if result.history else {}
        row.update({f"val_{k}": v for k, v in final.items()})
        row.update(run_probes(result.bundle, tr, va, probe_config, probes, coupling))
        if keep_models:
            row["_bundle"] = result.bundle
            row["_history"] = result.history
        rows.append(row)
    if out_dir is not None:
        write_grid_table(rows, out_dir / "grid.csv")
    return rows


def _resize_struct_head(bundle: ModelBundle, K: int, seed: int) -> ModelBundle:
    fresh = ModelBundle(replace(bundle.config, n_struct_tokens=K), seed=seed)
    state = {k: v for k, v in bundle.state_dict().items() if not k.startswith("struct_head.")}
    fresh.load_state_dict({**fresh.state_dict(), **state})
    return fresh


def write_grid_table(rows: Sequence[Dict[str, Any]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: List[str] = []
    for r in rows:
        for k in r:
            if not k.startswith("_") and k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(v) if isinstance(v, (list, tuple, dict)) else v
                        for k, v in r.items() if not k.startswith("_")})
