import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import asymdistill.train as train_mod
from asymdistill.data import synth_dataset
from asymdistill.exceptions import ConfigurationError, NonFiniteLossError, ValidationError
from asymdistill.losses import LossBreakdown
from asymdistill.model import EncoderSpec, ExpanderSpec, ProbeHead, build_joint, param_checksum
from asymdistill.train import (
    ExperimentConfig,
    MetricsRecord,
    ProbeConfig,
    evaluate,
    fit_head,
    fit_joint,
    lr_schedule,
    score_predictions,
    train_probe,
    train_ssl,
    train_supervised,
    transfer_eval,
)

FROZEN = json.loads((Path(__file__).parent / "fixtures" / "frozen.json").read_text())
TINY = EncoderSpec(name="desk_cnn_tiny")


@pytest.fixture(scope="module")
def small():
    return synth_dataset(128, seed=11, img_px=32)


def _cfg(**kw):
    base = dict(encoder=TINY, expander=ExpanderSpec(width=64), epochs=2, batch_size=32, lr_max=1e-3)
    return ExperimentConfig(**{**base, **kw})


def test_lr_schedule_anchors():
    assert lr_schedule(10, 100, 10, 1e-4) == pytest.approx(1e-4, abs=1e-12)
    assert lr_schedule(0, 100, 10, 1e-4) == 0.0
    assert lr_schedule(55, 100, 10, 1e-4) == pytest.approx(5e-5, abs=1e-12)
    for case in FROZEN["lr"]:
        assert lr_schedule(case["step"], 100, 10, 1e-4) == pytest.approx(case["value"], abs=1e-12)


@pytest.mark.parametrize("args", [(100, 100, 10), (-1, 100, 10), (0, 100, 0), (0, 100, 100)])
def test_lr_schedule_bounds(args):
    with pytest.raises(ValueError):
        lr_schedule(*args, 1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 400), st.data())
def test_lr_nonincreasing_after_warmup(total, data):
    warmup = data.draw(st.integers(1, total - 1))
    lrs = [lr_schedule(s, total, warmup, 1.0) for s in range(total)]
    assert all(0.0 <= v <= 1.0 for v in lrs)
    assert all(b <= a + 1e-15 for a, b in zip(lrs[warmup:], lrs[warmup + 1 :]))
    # Continuity at the junction: one-step jumps stay within one ramp increment.
    assert abs(lrs[warmup] - lrs[warmup - 1]) <= 1.0 / warmup + 1e-12


def test_config_validation_and_hash():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(loss="byol")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(fraction=0.0)
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"epochs": 2, "bogus": 1})
    with pytest.raises(ConfigurationError):
        ProbeConfig(task="organ")
    a = ExperimentConfig.desk(seed=3)
    assert ExperimentConfig.from_dict(a.to_dict()).config_hash() == a.config_hash()
    assert ExperimentConfig.desk(seed=4).config_hash() != a.config_hash()


def test_metrics_record_monotone_steps():
    rec = MetricsRecord(columns=("step", "total"))
    rec.log_step({"step": 0, "total": 1.0})
    with pytest.raises(ValueError):
        rec.log_step({"step": 0, "total": 0.5})
    assert rec.to_csv() == "step,total\n0,1.0\n"


@pytest.mark.parametrize("loss", ["vicreg", "simclr"])
@pytest.mark.parametrize("seed", range(3))
def test_loss_decreases_over_two_epochs(small, loss, seed):
    _, rec = fit_joint(_cfg(loss=loss, seed=seed), small)
    totals = [r["total"] for r in rec.steps]
    assert all(math.isfinite(t) for t in totals)
    half = len(totals) // 2
    assert np.mean(totals[half:]) < np.mean(totals[:half])


def test_shared_checksums_equal_every_epoch(small):
    seen = []
    model, rec = fit_joint(_cfg(shared_weights=True, epochs=3), small, on_epoch=lambda m, row: seen.append(row))
    assert len(seen) == 3
    assert all(r["checksum_a"] == r["checksum_b"] for r in rec.epochs)
    assert model.branch_a is model.branch_b


def test_train_ssl_deterministic(small, tmp_path):
    cfg = _cfg(seed=5)
    ckpt_a, _ = train_ssl(cfg, small, tmp_path / "a")
    ckpt_b, _ = train_ssl(cfg, small, tmp_path / "b")
    assert ckpt_a.read_bytes() == ckpt_b.read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("step,epoch,lr,total,comp_invariance")
    ckpt_c, _ = train_ssl(_cfg(seed=6), small, tmp_path / "c")
    assert ckpt_c.read_bytes() != ckpt_a.read_bytes()


def test_non_finite_loss_dumps_diagnostic(small, tmp_path, monkeypatch):
    def bad(cfg):
        return lambda a, b: LossBreakdown((a.sum() + b.sum()) * float("nan"), {"invariance": float("nan")})

    monkeypatch.setattr(train_mod, "_loss_fn", bad)
    with pytest.raises(NonFiniteLossError):
        train_ssl(_cfg(), small, tmp_path)
    diag = json.loads((tmp_path / "diagnostic.json").read_text())
    assert diag["batch"] == 0 and diag["step"] == 0
    assert "invariance" in diag["components"]
    assert not (tmp_path / "checkpoint.ckpt").exists()


def test_probe_freezes_encoder_and_reports_accuracy(small):
    model = build_joint(EncoderSpec(name="desk_cnn_tiny", input_px=32), ExpanderSpec(width=32), True, False, seed=1)
    before = param_checksum(model)
    head, res = train_probe(model, ProbeConfig(task="tissue", branch="sparse", epochs=3), small, small)
    assert param_checksum(model) == before
    assert 0.0 <= res.accuracy <= 1.0
    assert head.n_classes == 4 and res.confusion.sum() == len(small)


def test_probe_missing_labels_is_configuration_error(small):
    no_cell = small.subset(range(len(small)))
    no_cell.cell = None
    model = build_joint(EncoderSpec(name="desk_cnn_tiny", input_px=32), ExpanderSpec(width=32), True, False)
    with pytest.raises(ConfigurationError):
        train_probe(model, ProbeConfig(task="cell", epochs=1), no_cell, no_cell)


def test_head_on_separable_embeddings():
    rng = np.random.default_rng(0)
    centres = rng.normal(scale=4.0, size=(5, 16))
    y = np.repeat(np.arange(5), 60)
    emb = torch.tensor(centres[y] + rng.normal(size=(300, 16)), dtype=torch.float32)
    head = fit_head(emb[::2], y[::2], 5, epochs=50, lr=1e-2, batch_size=32)
    acc = float((head.logits(emb[1::2]).argmax(1).numpy() == y[1::2]).mean())
    assert acc > 0.95
    with pytest.raises(ValidationError):
        fit_head(emb, y[:10], 5)
    with pytest.raises(ValidationError):
        fit_head(emb[:3], np.array([0, 1, 7]), 5)


def test_head_is_affine_in_raw_embeddings():
    # Standardisation folded into W, b must give the same logits as the fitted layer.
    rng = np.random.default_rng(1)
    emb = torch.tensor(rng.normal(loc=3.0, scale=0.02, size=(64, 6)), dtype=torch.float32)
    y = (emb[:, 0] > 3.0).long().numpy()
    head = fit_head(emb, y, 2, epochs=30, lr=1e-2, batch_size=16)
    assert float((head.logits(emb).argmax(1).numpy() == y).mean()) > 0.9


def test_score_predictions_contracts():
    y = np.array([0, 1, 2, 2, 1, 0, 2, 1, 0, 2])
    perfect = score_predictions(y, y, 3)
    assert perfect.accuracy == 1.0
    assert np.array_equal(perfect.confusion, np.diag([3, 3, 4]))
    const = score_predictions(y, np.full(10, 1), 3)
    assert np.count_nonzero(const.confusion.sum(0)) == 1 and const.confusion[:, 1].sum() == 10
    pred = np.array([0, 1, 1, 2, 1, 2, 2, 0, 0, 1])
    # Hand count: positions 0, 1, 3, 4, 6, 8 agree.
    res = score_predictions(y, pred, 3)
    assert res.accuracy == pytest.approx(6 / 10)
    assert res.accuracy == np.trace(res.confusion) / res.confusion.sum()
    assert np.array_equal(res.confusion.sum(1), np.bincount(y, minlength=3))
    with pytest.raises(ValidationError):
        score_predictions([], [], 3)


def test_evaluate_empty_split(small):
    model = build_joint(EncoderSpec(name="desk_cnn_tiny", input_px=32), ExpanderSpec(width=32), True, False)
    with pytest.raises(ValidationError):
        evaluate(model.branch_a.encoder, ProbeHead.zeros(64, 4), small.subset([]), "sparse", "tissue")


@pytest.fixture(scope="module")
def supervised_run():
    tr = synth_dataset(1024, seed=21)
    te = synth_dataset(256, seed=22)
    model, res, rec = train_supervised("tissue", EncoderSpec(), tr, te, epochs=20, batch_size=32, lr_max=3e-3, seed=0)
    return tr, te, model, res, rec


def test_supervised_beats_chance_and_learns(supervised_run):
    _, _, _, res, rec = supervised_run
    assert res.accuracy >= 3 * 0.25
    per_epoch = [np.mean([r["total"] for r in rec.steps if r["epoch"] == e]) for e in range(2)]
    assert per_epoch[1] < per_epoch[0]


def test_supervised_reproducible(tmp_path):
    tr = synth_dataset(64, seed=3, img_px=32)
    runs = [train_supervised("cell", TINY, tr, tr, out_dir=tmp_path / k, epochs=1, batch_size=16, seed=2) for k in "ab"]
    assert runs[0][1].accuracy == runs[1][1].accuracy
    assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == (tmp_path / "b" / "checkpoint.ckpt").read_bytes()


def test_transfer_both_directions_and_self(supervised_run):
    tr, te, model, res, _ = supervised_run
    before = param_checksum(model)
    pcfg = ProbeConfig.desk()
    to_cell = transfer_eval(model, "cell", tr, te, pcfg=pcfg)
    to_self = transfer_eval(model, "tissue", tr, te, pcfg=pcfg)
    assert 0.0 <= to_cell.accuracy <= 1.0 and to_cell.confusion.shape == (tr.n_cell_classes,) * 2
    assert abs(to_self.accuracy - res.accuracy) <= 0.1
    assert param_checksum(model) == before
