"""Command-line entry point: ``structalign <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
The environment variable STRUCTALIGN_SEED, when set, overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

from . import __version__
from .corpus import (
    DEFAULT_RES_MAX,
    DEFAULT_RFREE_MAX,
    CorpusError,
    curate_reference,
    load_corpus,
    save_corpus,
    split_train_val,
)
from .evaluation import (
    ProbeConfig,
    export_embeddings,
    parse_mutant,
    probe_contact,
    probe_ss,
    pseudo_perplexity,
    spearman,
    zero_shot_score,
)
from .model import FrozenModelError, load_checkpoint
from .synthgen import GeneratorConfig, generate
from .tokenizer import Codebook, fit_corpus_codebook, tokenize
from .trainer import NumericalError, TrainConfig, align, prepare_corpus, run_ablation_grid, train_reference

logger = logging.getLogger("structalign")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "STRUCTALIGN_SEED"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifests and locking

def git_blob_hash(path: str | Path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Written before work starts and completed when the command finishes."""

    def __init__(self, path: Path, command: str, argv: Sequence[str], config: Dict[str, Any],
                 seed: Optional[int], inputs: Sequence[str | Path]):
        self.path = path
        self.data = {
            "command": command,
            "argv": list(argv),
            "config": config,
            "seed": seed,
            "inputs": {str(p): git_blob_hash(p) for p in inputs if p is not None},
            "version": __version__,
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str, **extra: Any) -> None:
        self.data.update(extra, finished=_now(), status=status)
        self.write()


def manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


@contextmanager
def run_lock(directory: Path) -> Iterator[None]:
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{directory} is locked by another command (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# helpers

def _existing(path: Optional[str], what: str) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _resolve_seed(args: argparse.Namespace) -> None:
    env = os.environ.get(SEED_ENV)
    if env is not None and hasattr(args, "seed"):
        try:
            args.seed = int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _config_overrides(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    obj = json.loads(path.read_text())
    if not isinstance(obj, dict):
        raise CorpusError(f"{path}: config must be a JSON object")
    return obj


def _load_prepared(corpus_path: Path, config: TrainConfig, codebook_path: Optional[Path]):
    records = load_corpus(corpus_path)
    if not records:
        raise CorpusError(f"{corpus_path}: corpus is empty")
    codebook = Codebook.load(codebook_path) if codebook_path else None
    return prepare_corpus(records, config, codebook)


def _read_wild_type(text: str) -> str:
    p = Path(text)
    if p.exists():
        lines = [ln.strip() for ln in p.read_text().splitlines()]
        return "".join(ln for ln in lines if ln and not ln.startswith(">"))
    return text.strip()


def _read_lines(path: Path) -> List[str]:
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]


def _frozen_checkpoint(path: Path):
    bundle, _ = load_checkpoint(path)
    return bundle if bundle.frozen else bundle.freeze()


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args: argparse.Namespace) -> Dict[str, Any]:
    cfg = GeneratorConfig(n_proteins=args.n, length_range=(args.len_min, args.len_max),
                          helix_fraction=args.helix_frac, strand_fraction=args.strand_frac,
                          seq_structure_coupling=args.coupling, noise_fraction=args.noise_frac,
                          coord_noise_sigma=args.noise_sigma, embed_dim=args.embed_dim,
                          k_neighbors=args.k_neighbors, seed=args.seed)
    records = generate(cfg)
    if args.codebook:
        cb = Codebook.load(_existing(args.codebook, "codebook"))
        for r in records:
            r.structure_tokens = tokenize(r.coords, cb)
    save_corpus(records, args.out)
    return {"records": len(records), "corrupted": sum(r.corrupted for r in records)}


def cmd_fit_tokenizer(args: argparse.Namespace) -> Dict[str, Any]:
    records = load_corpus(_existing(args.corpus, "corpus"))
    cb = fit_corpus_codebook(records, args.k, args.seed, args.max_iters)
    cb.save(args.out)
    if args.tokenized_out:
        for r in records:
            r.structure_tokens = tokenize(r.coords, cb)
        save_corpus(records, args.tokenized_out)
    return {"K": cb.K, "dim": cb.dim}


def _train_config(args: argparse.Namespace, **fixed: Any) -> TrainConfig:
    overrides = _config_overrides(_existing(args.config, "config"))
    for flag, key in (("epochs", "epochs"), ("warmup_epochs", "warmup_epochs"),
                      ("lr_backbone", "peak_lr_backbone"), ("lr_heads", "peak_lr_heads"),
                      ("batch_size", "batch_size"), ("max_len", "max_len"), ("k", "codebook_size")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if "epochs" in overrides and "warmup_epochs" not in overrides:
        # keep the default 1:10 warmup ratio for shorter or longer runs
        overrides["warmup_epochs"] = overrides["epochs"] / 10
    overrides["seed"] = args.seed
    overrides.update(fixed)
    return TrainConfig.from_json(overrides)


def cmd_train_ref(args: argparse.Namespace) -> Dict[str, Any]:
    config = _train_config(args)
    records, codebook = _load_prepared(_existing(args.corpus, "corpus"), config,
                                       _existing(args.codebook, "codebook"))
    curated = curate_reference(records, args.res_max, args.rfree_max)
    if not curated:
        raise CorpusError("no record passes the reference quality filter")
    result = train_reference(curated, config, run_dir=args.out, codebook=codebook)
    return {"reference_records": len(curated), "checkpoint": str(Path(args.out) / "checkpoints" / "reference.pt"),
            "final": result.history[-1] if result.history else None}


def cmd_align(args: argparse.Namespace) -> Dict[str, Any]:
    config = _train_config(args, strategy=args.strategy, rho=1.0 if args.strategy == "full" else args.rho,
                           gamma_latent=args.gamma_latent, gamma_physical=args.gamma_physical,
                           selection_enabled=not args.no_selection, audit=args.audit,
                           clip_norm=args.clip_norm)
    init = None
    if args.init:
        init, _ = load_checkpoint(_existing(args.init, "init checkpoint"))
        if init.frozen:
            raise FrozenModelError(f"{args.init} is a frozen checkpoint and cannot be aligned")
    reference = None
    if args.ref:
        reference, _ = load_checkpoint(_existing(args.ref, "reference checkpoint"))
        reference.freeze()
    codebook_path = _existing(args.codebook, "codebook")
    if codebook_path is None and Path(args.out, "codebook.json").exists() and args.resume:
        codebook_path = Path(args.out, "codebook.json")
    records, codebook = _load_prepared(_existing(args.corpus, "corpus"), config, codebook_path)
    if config.selection_enabled and config.selection.needs_reference and reference is None \
            and (config.gamma_latent or config.gamma_physical):
        raise UsageError("--strategy excess needs --ref (or use --strategy full)")
    result = align(init, records, reference, config, run_dir=args.out, codebook=codebook, resume=args.resume,
                   stop_after_epoch=args.stop_after_epoch)
    return {"epochs": len(result.history), "final": result.history[-1] if result.history else None}


def _probe_config(args: argparse.Namespace) -> ProbeConfig:
    return ProbeConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, hidden=args.hidden,
                       weight_decay=args.weight_decay, seed=args.seed)


def cmd_probe(args: argparse.Namespace) -> Dict[str, Any]:
    bundle = _frozen_checkpoint(_existing(args.ckpt, "checkpoint"))
    train = load_corpus(_existing(args.corpus, "corpus"))
    test = load_corpus(_existing(args.test_corpus, "test corpus")) if args.test_corpus else None
    fn = probe_contact if args.task == "contact" else probe_ss
    report = fn(bundle, train, test, _probe_config(args))
    out = {"task": report.task, "metric": report.metric, "value": report.value,
           "per_protein": report.per_protein, "seed": report.seed}
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    return {"value": report.value}


def cmd_ppl(args: argparse.Namespace) -> Dict[str, Any]:
    bundle = _frozen_checkpoint(_existing(args.ckpt, "checkpoint"))
    records = load_corpus(_existing(args.corpus, "corpus"))
    values = []
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["protein_id", "length", "pseudo_perplexity"])
        for r in records:
            seq = r.sequence[: bundle.config.max_len]
            v = pseudo_perplexity(bundle, seq)
            values.append(v)
            w.writerow([r.id, len(seq), repr(v)])
    return {"mean": sum(values) / len(values) if values else None}


def cmd_score(args: argparse.Namespace) -> Dict[str, Any]:
    bundle = _frozen_checkpoint(_existing(args.ckpt, "checkpoint"))
    wt = _read_wild_type(args.wt)
    mutants = _read_lines(_existing(args.mutations, "mutations file"))
    labels = None
    if args.labels:
        labels = [float(x) for x in _read_lines(_existing(args.labels, "labels file"))]
        if len(labels) != len(mutants):
            raise CorpusError(f"{len(labels)} labels for {len(mutants)} mutants")
    scores = [zero_shot_score(bundle, wt, parse_mutant(m, wt)) for m in mutants]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mutant", "score"] + (["label"] if labels else []))
        for k, (m, s) in enumerate(zip(mutants, scores)):
            w.writerow([m, repr(s)] + ([repr(labels[k])] if labels else []))
    summary: Dict[str, Any] = {"n": len(scores)}
    if labels:
        summary["spearman"] = spearman(scores, labels)
    return summary


def cmd_ablate(args: argparse.Namespace) -> Dict[str, Any]:
    grid_spec = json.loads(_existing(args.grid, "grid file").read_text())
    if not isinstance(grid_spec, dict) or not grid_spec:
        raise UsageError("grid file must be a non-empty JSON object")
    base = dict(grid_spec.get("base", {}))
    base["seed"] = args.seed
    if args.epochs is not None:
        base["epochs"] = args.epochs
    config = TrainConfig.from_json({**TrainConfig().to_json(), **base})
    probe_cfg = ProbeConfig(**{**grid_spec.get("probe", {}), "seed": args.seed})
    records = load_corpus(_existing(args.corpus, "corpus"))
    if not records:
        raise CorpusError("corpus is empty")
    train, val = split_train_val(records, config.val_fraction, config.seed)
    init = None
    if args.init:
        init, _ = load_checkpoint(_existing(args.init, "init checkpoint"))
    rows = run_ablation_grid(train, val, grid_spec, config, out_dir=args.out, init=init,
                             probe_config=probe_cfg, coupling=args.coupling,
                             probes=tuple(args.probes))
    return {"rows": len(rows), "table": str(Path(args.out) / "grid.csv")}


def cmd_export_embeddings(args: argparse.Namespace) -> Dict[str, Any]:
    bundle = _frozen_checkpoint(_existing(args.ckpt, "checkpoint"))
    records = load_corpus(_existing(args.corpus, "corpus"))
    return {"rows": export_embeddings(bundle, records, args.out)}


def cmd_replay(args: argparse.Namespace) -> Dict[str, Any]:
    manifest = json.loads(_existing(args.manifest, "manifest").read_text())
    return {"exit_code": main(manifest["argv"])}


# ---------------------------------------------------------------------------
# parser

_Fmt = argparse.ArgumentDefaultsHelpFormatter


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structalign", description=__doc__.splitlines()[0], formatter_class=_Fmt)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def seed(sp):
        sp.add_argument("--seed", type=int, default=0, help=f"random seed ({SEED_ENV} overrides)")

    g = sub.add_parser("gen", help="generate a synthetic corpus", formatter_class=_Fmt)
    g.add_argument("--n", type=int, default=256, help="number of proteins")
    g.add_argument("--len-min", type=int, default=32, help="shortest protein")
    g.add_argument("--len-max", type=int, default=64, help="longest protein")
    g.add_argument("--coupling", type=float, default=0.8, help="sequence-structure coupling in [0, 1]")
    g.add_argument("--noise-frac", type=float, default=0.0, help="fraction of records to corrupt")
    g.add_argument("--noise-sigma", type=float, default=2.0, help="coordinate noise of corrupted records (angstrom)")
    g.add_argument("--helix-frac", type=float, default=0.4, help="share of residues in helices")
    g.add_argument("--strand-frac", type=float, default=0.4, help="share of residues in strands")
    g.add_argument("--embed-dim", type=int, default=16, help="surrogate structure embedding width D_g")
    g.add_argument("--k-neighbors", type=int, default=8, help="neighbours per residue in the surrogate embedding")
    g.add_argument("--codebook", help="tokenize records with this codebook")
    seed(g)
    g.add_argument("--out", required=True, help="output corpus (JSON lines)")
    g.set_defaults(func=cmd_gen, out_is_dir=False, inputs=("codebook",))

    t = sub.add_parser("fit-tokenizer", help="fit a structure-token codebook", formatter_class=_Fmt)
    t.add_argument("--corpus", required=True, help="corpus (JSON lines)")
    t.add_argument("--k", type=int, default=20, help="codebook size")
    t.add_argument("--max-iters", type=int, default=100, help="k-means iteration cap")
    t.add_argument("--tokenized-out", help="also write the corpus with tokens")
    seed(t)
    t.add_argument("--out", required=True, help="codebook JSON")
    t.set_defaults(func=cmd_fit_tokenizer, out_is_dir=False, inputs=("corpus",))

    def training_flags(sp):
        sp.add_argument("--corpus", required=True, help="training corpus (JSON lines)")
        sp.add_argument("--config", help="JSON file of training config overrides")
        sp.add_argument("--codebook", help="codebook for records without tokens (else one is fit)")
        sp.add_argument("--epochs", type=int, default=None, help="training epochs (config default 20)")
        sp.add_argument("--warmup-epochs", type=float, default=None, help="warmup epochs (config default 2)")
        sp.add_argument("--lr-backbone", type=float, default=None, help="peak backbone lr (config default 1e-4)")
        sp.add_argument("--lr-heads", type=float, default=None, help="peak head lr (config default 1e-3)")
        sp.add_argument("--batch-size", type=int, default=None, help="records per batch (config default 16)")
        sp.add_argument("--max-len", type=int, default=None, help="truncation length (config default 64)")
        sp.add_argument("--k", type=int, default=None, help="codebook size when one is fit (config default 20)")
        seed(sp)
        sp.add_argument("--out", required=True, help="run directory")

    r = sub.add_parser("train-ref", help="train the frozen reference model", formatter_class=_Fmt)
    training_flags(r)
    r.add_argument("--res-max", type=float, default=DEFAULT_RES_MAX, help="keep resolution < this (angstrom)")
    r.add_argument("--rfree-max", type=float, default=DEFAULT_RFREE_MAX, help="keep R-free < this")
    r.set_defaults(func=cmd_train_ref, out_is_dir=True, inputs=("corpus", "config", "codebook"))

    a = sub.add_parser("align", help="structure-align a model", formatter_class=_Fmt)
    training_flags(a)
    a.add_argument("--init", help="checkpoint to start from (else a fresh model)")
    a.add_argument("--ref", help="frozen reference checkpoint (needed for --strategy excess)")
    a.add_argument("--strategy", choices=["excess", "loss-large", "loss-small", "full"], default="excess",
                   help="residue selection strategy")
    a.add_argument("--rho", type=float, default=0.8, help="selection ratio")
    a.add_argument("--gamma-latent", type=float, default=0.5, help="weight of the contrastive task")
    a.add_argument("--gamma-physical", type=float, default=0.5, help="weight of the structure-token task")
    a.add_argument("--no-selection", action="store_true", help="build without the selection module")
    a.add_argument("--audit", action="store_true", help="write logs/selection_audit.csv")
    a.add_argument("--clip-norm", type=float, default=None, help="gradient clipping norm")
    a.add_argument("--resume", action="store_true", help="continue from checkpoints/last.pt in --out")
    a.add_argument("--stop-after-epoch", type=int, default=None,
                   help="stop after this epoch, leaving a run that --resume continues")
    a.set_defaults(func=cmd_align, out_is_dir=True, inputs=("corpus", "config", "codebook", "init", "ref"))

    def probe_flags(sp):
        sp.add_argument("--epochs", type=int, default=20, help="probe training epochs")
        sp.add_argument("--batch-size", type=int, default=128, help="probe batch size")
        sp.add_argument("--lr", type=float, default=1e-3, help="probe learning rate")
        sp.add_argument("--weight-decay", type=float, default=0.01, help="probe weight decay")
        sp.add_argument("--hidden", type=int, default=128, help="probe hidden width")

    pr = sub.add_parser("probe", help="train a probe on frozen embeddings", formatter_class=_Fmt)
    pr.add_argument("--ckpt", required=True, help="model checkpoint")
    pr.add_argument("--task", choices=["contact", "ss"], required=True, help="probe task")
    pr.add_argument("--corpus", required=True, help="probe training corpus (split 80/20 without --test-corpus)")
    pr.add_argument("--test-corpus", help="held-out corpus to score")
    probe_flags(pr)
    seed(pr)
    pr.add_argument("--out", required=True, help="report JSON")
    pr.set_defaults(func=cmd_probe, out_is_dir=False, inputs=("ckpt", "corpus", "test_corpus"))

    pp = sub.add_parser("ppl", help="per-protein pseudo-perplexity", formatter_class=_Fmt)
    pp.add_argument("--ckpt", required=True, help="model checkpoint")
    pp.add_argument("--corpus", required=True, help="corpus (JSON lines)")
    pp.add_argument("--out", required=True, help="CSV")
    pp.set_defaults(func=cmd_ppl, out_is_dir=False, inputs=("ckpt", "corpus"))

    sc = sub.add_parser("score", help="zero-shot mutation scores", formatter_class=_Fmt)
    sc.add_argument("--ckpt", required=True, help="model checkpoint")
    sc.add_argument("--wt", required=True, help="wild-type sequence or a FASTA file")
    sc.add_argument("--mutations", required=True, help="one mutant per line, e.g. A12G or A12G:L15V")
    sc.add_argument("--labels", help="one fitness value per line, aligned with --mutations")
    sc.add_argument("--out", required=True, help="CSV")
    sc.set_defaults(func=cmd_score, out_is_dir=False, inputs=("ckpt", "mutations", "labels"))

    ab = sub.add_parser("ablate", help="run an ablation grid", formatter_class=_Fmt)
    ab.add_argument("--corpus", required=True, help="corpus, split into train and validation")
    ab.add_argument("--grid", required=True, help='JSON: {"base": {...}, "probe": {...}, "cells": [...] | "axes": {...}}')
    ab.add_argument("--init", help="checkpoint every cell starts from")
    ab.add_argument("--epochs", type=int, default=None, help="override base epochs")
    ab.add_argument("--coupling", type=float, default=None, help="generator coupling, enables zero-shot scoring")
    ab.add_argument("--probes", nargs="+", default=["contact", "ss", "ppl", "zero_shot"],
                    choices=["contact", "ss", "ppl", "zero_shot"], help="probes run on every cell")
    seed(ab)
    ab.add_argument("--out", required=True, help="output directory")
    ab.set_defaults(func=cmd_ablate, out_is_dir=True, inputs=("corpus", "grid", "init"))

    ex = sub.add_parser("export-embeddings", help="per-residue embeddings with labels as CSV", formatter_class=_Fmt)
    ex.add_argument("--ckpt", required=True, help="model checkpoint")
    ex.add_argument("--corpus", required=True, help="corpus with secondary-structure labels")
    ex.add_argument("--out", required=True, help="CSV")
    ex.set_defaults(func=cmd_export_embeddings, out_is_dir=False, inputs=("ckpt", "corpus"))

    rp = sub.add_parser("replay", help="re-run a command from its manifest", formatter_class=_Fmt)
    rp.add_argument("--manifest", required=True, help="manifest JSON of an earlier command")
    rp.set_defaults(func=cmd_replay, out_is_dir=None, inputs=())
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _resolve_seed(args)
        if args.out_is_dir is None:
            return _report(args.func(args))
        for name in args.inputs:
            _existing(getattr(args, name, None), name.replace("_", " "))
        out = Path(args.out)
        config = {k: v for k, v in vars(args).items() if k not in ("func", "inputs", "out_is_dir")}
        inputs = [getattr(args, n) for n in args.inputs if getattr(args, n, None)]
        if args.out_is_dir:
            with run_lock(out):
                manifest = RunManifest(manifest_path(out, True), args.command, argv, config,
                                       getattr(args, "seed", None), inputs)
                summary = _run(args, manifest)
        else:
            out.parent.mkdir(parents=True, exist_ok=True)
            manifest = RunManifest(manifest_path(out, False), args.command, argv, config,
                                   getattr(args, "seed", None), inputs)
            summary = _run(args, manifest)
        return _report(summary)
    except UsageError as exc:
        print(f"structalign: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"structalign: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, FrozenModelError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"structalign: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def _run(args: argparse.Namespace, manifest: RunManifest) -> Dict[str, Any]:
    try:
        summary = args.func(args)
    except BaseException as exc:
        manifest.finish("failed", error=str(exc))
        raise
    manifest.finish("ok", summary=summary)
    return summary


def _report(summary: Dict[str, Any]) -> int:
    print(json.dumps(summary, default=str))
    code = summary.get("exit_code") if isinstance(summary, dict) else None
    return int(code) if code is not None else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
