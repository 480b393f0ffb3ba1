import json
import math

import pytest
import torch

from structalign.corpus import curate_reference
from structalign.model import FrozenModelError, ModelBundle, load_checkpoint
from structalign.trainer import (
    NumericalError,
    TrainConfig,
    align,
    evaluate_losses,
    expand_grid,
    plm_config,
    pretrain_base,
    run_ablation_grid,
    train_reference,
)

from conftest import tiny_train_config


@pytest.fixture(scope="module")
def split(small_corpus):
    recs, cb = small_corpus
    return recs[:32], recs[32:], cb


@pytest.fixture(scope="module")
def reference(split):
    train, _, cb = split
    return train_reference(curate_reference(train), tiny_train_config(epochs=3), codebook=cb, val_records=[]).bundle


def params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_config_validation():
    TrainConfig(epochs=1, warmup_epochs=0.5)
    with pytest.raises(ValueError):
        TrainConfig(epochs=2, warmup_epochs=2)
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(peak_lr_backbone=0)
    with pytest.raises(ValueError):
        TrainConfig(gamma_latent=0.7, gamma_physical=0.7)
    with pytest.raises(ValueError):
        TrainConfig(strategy="best")
    with pytest.raises(ValueError):
        TrainConfig.from_json({"epochs": 3, "bogus": 1})
    cfg = TrainConfig(seed=4)
    assert TrainConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    assert cfg.updated(gamma_latent=0.0, gamma_physical=0.0).weights.latent == 0.0


def test_reference_is_smaller_and_frozen(split, reference):
    train, val, cb = split
    assert reference.frozen
    assert (reference.config.d_model, reference.config.n_layers) == (8, 1)
    with pytest.raises(FrozenModelError):
        align(reference, train, reference, tiny_train_config(), val_records=val, codebook=cb)


def test_excess_without_reference_is_an_error(split):
    train, val, cb = split
    with pytest.raises(ValueError):
        align(None, train, None, tiny_train_config(), val_records=val, codebook=cb)


def test_training_reduces_validation_loss(split, reference):
    train, val, cb = split
    cfg = tiny_train_config(epochs=3, peak_lr_heads=3e-3)
    model = ModelBundle(plm_config(cfg, 16, cb.K), seed=cfg.seed)
    before = evaluate_losses(model, val, cfg, 1)["overall"]
    res = align(None, train, reference, cfg, val_records=val, codebook=cb)
    assert res.history[-1]["val"]["overall"] < before
    assert len(res.history) == 3
    for fam in ("mlm", "a2g", "g2a", "latent", "physical", "overall"):
        assert math.isfinite(res.history[-1]["val"][fam])


def test_run_directory_layout_and_logs(tmp_path, split, reference):
    train, val, cb = split
    cfg = tiny_train_config(audit=True)
    align(None, train, reference, cfg, run_dir=tmp_path, val_records=val, codebook=cb)
    for name in ("config.json", "codebook.json", "logs/metrics.jsonl", "curves.csv", "logs/selection_audit.csv",
                 "checkpoints/best.pt", "checkpoints/last.pt", "checkpoints/final.pt"):
        assert (tmp_path / name).exists(), name
    lines = [json.loads(l) for l in (tmp_path / "logs" / "metrics.jsonl").read_text().splitlines()]
    steps = [l for l in lines if l["kind"] == "step"]
    assert len(steps) == 2 * math.ceil(len(train) / cfg.batch_size)
    assert [s["step"] for s in steps] == list(range(1, len(steps) + 1))
    for s in steps:
        for fam in ("a2g", "g2a", "physical"):
            assert s["selected"][fam] == max(1, math.floor(s["n_residues"] * cfg.rho + 1e-9))
    # warmup reaches the peak then cosine decays toward zero
    lrs = [s["lr"] for s in steps]
    assert max(lrs) == pytest.approx(cfg.peak_lr_backbone)
    assert lrs[-1] < lrs[len(lrs) // 2]
    header = (tmp_path / "curves.csv").read_text().splitlines()[0].split(",")
    assert "val_latent" in header and "val_physical" in header


def test_same_seed_is_bitwise_reproducible(split, reference):
    train, val, cb = split
    cfg = tiny_train_config()
    a = align(None, train, reference, cfg, val_records=val, codebook=cb)
    b = align(None, train, reference, cfg, val_records=val, codebook=cb)
    assert params_equal(a.bundle, b.bundle)
    assert a.history == b.history


def test_full_strategy_equals_disabled_selection(split):
    train, val, cb = split
    a = align(None, train, None, tiny_train_config(epochs=3, strategy="full", rho=1.0), val_records=val, codebook=cb)
    b = align(None, train, None, tiny_train_config(epochs=3, selection_enabled=False), val_records=val, codebook=cb)
    assert params_equal(a.bundle, b.bundle)
    assert a.history == b.history


def test_without_dual_needs_no_reference(split):
    train, val, cb = split
    res = align(None, train, None, tiny_train_config(gamma_latent=0.0, gamma_physical=0.0),
                val_records=val, codebook=cb)
    assert res.history[-1]["train"]["overall"] == pytest.approx(res.history[-1]["train"]["mlm"], abs=1e-12)


def test_resume_matches_uninterrupted_run(tmp_path, split, reference):
    train, val, cb = split
    cfg = tiny_train_config(epochs=3)
    full = align(None, train, reference, cfg, run_dir=tmp_path / "a", val_records=val, codebook=cb)
    align(None, train, reference, cfg, run_dir=tmp_path / "b", val_records=val, codebook=cb, stop_after_epoch=1)
    # a crash after the checkpoint leaves extra log lines that resume must discard
    with open(tmp_path / "b" / "logs" / "metrics.jsonl", "a") as fh:
        fh.write('{"kind": "step", "step": 999}\n')
    resumed = align(None, train, reference, cfg, run_dir=tmp_path / "b", val_records=val, codebook=cb, resume=True)
    assert params_equal(full.bundle, resumed.bundle)
    assert full.history == resumed.history
    assert (tmp_path / "a" / "logs" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "logs" / "metrics.jsonl").read_bytes()


def test_nan_aborts_with_last_good_checkpoint(tmp_path, split, reference):
    train, val, cb = split
    cfg = tiny_train_config()
    model = ModelBundle(plm_config(cfg, 16, cb.K), seed=0)
    with torch.no_grad():
        model.tok_emb.weight[3, 0] = float("nan")
    with pytest.raises(NumericalError) as err:
        align(model, train, reference, cfg, run_dir=tmp_path, val_records=val, codebook=cb)
    assert err.value.step == 1
    assert err.value.checkpoint == tmp_path / "checkpoints" / "last.pt"
    assert err.value.checkpoint.exists()


def test_init_dims_must_match(split):
    train, val, cb = split
    from dataclasses import replace

    cfg = tiny_train_config(gamma_latent=0.0, gamma_physical=0.0)
    wrong = ModelBundle(replace(plm_config(cfg, 16, cb.K), n_struct_tokens=cb.K + 1))
    with pytest.raises(ValueError):
        align(wrong, train, None, cfg, val_records=val, codebook=cb)


def test_fresh_heads_keep_backbone(split):
    train, val, cb = split
    cfg = tiny_train_config(epochs=2)
    base = pretrain_base(train, cfg, codebook=cb, val_records=val).bundle
    assert not base.frozen
    cfg = cfg.updated(strategy="full", rho=1.0)
    res = align(base, train, None, cfg, val_records=val, codebook=cb)
    scratch = align(None, train, None, cfg, val_records=val, codebook=cb)
    # the init model is copied, never modified in place
    assert not params_equal(base, res.bundle)
    # the pretrained backbone and MLM head survive the head reset
    assert res.history[0]["val"]["mlm"] < scratch.history[0]["val"]["mlm"]


def test_expand_grid():
    cells = expand_grid({"axes": {"K": [20, 512], "strategy": ["excess", "full"]}})
    assert len(cells) == 4 and cells[0]["name"] == "K=20,strategy=excess"
    assert len(expand_grid({"cells": [{"name": "x", "gamma_latent": 0.0}]})) == 1
    assert len(expand_grid({"K": [20, 512]})) == 2
    for bad in ({}, {"cells": []}, {"axes": {}}):
        with pytest.raises(ValueError):
            expand_grid(bad)


def test_dual_task_grid_rows(tmp_path, split):
    train, val, cb = split
    grid = {"cells": [
        {"name": "full", "gamma_latent": 0.5, "gamma_physical": 0.5},
        {"name": "w/o latent", "gamma_latent": 0.0, "gamma_physical": 0.5},
        {"name": "w/o physical", "gamma_latent": 0.5, "gamma_physical": 0.0},
        {"name": "w/o dual", "gamma_latent": 0.0, "gamma_physical": 0.0},
    ]}
    from structalign.evaluation import ProbeConfig

    rows = run_ablation_grid(train, val, grid, tiny_train_config(epochs=2, reference_epochs=2), out_dir=tmp_path,
                             probe_config=ProbeConfig(epochs=2), probes=("ss", "ppl"))
    assert [r["name"] for r in rows] == ["full", "w/o latent", "w/o physical", "w/o dual"]
    for r in rows:
        assert 0 <= r["ss_accuracy"] <= 1 and r["pseudo_perplexity"] >= 1
    wo_dual = rows[3]
    assert wo_dual["val_overall"] == pytest.approx(wo_dual["val_mlm"], abs=1e-12)
    lines = (tmp_path / "grid.csv").read_text().splitlines()
    assert len(lines) == 5


def test_codebook_grid(split):
    train, val, _ = split
    from structalign.evaluation import ProbeConfig

    rows = run_ablation_grid(train, val, {"K": [8, 12]}, tiny_train_config(epochs=2, strategy="full", rho=1.0),
                             probe_config=ProbeConfig(epochs=2), probes=("ss",))
    assert [r["K"] for r in rows] == [8, 12]
    assert all(0 <= r["ss_accuracy"] <= 1 for r in rows)
