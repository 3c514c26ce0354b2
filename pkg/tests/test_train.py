import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hflab.errors import DegenerateTargets, DivergedTraining, EmptyClass, EmptySplit, InvalidSpec
from hflab.features import N_FEATURES, WindowDataset, build_feature_rows
from hflab.kernels import normalize_windows
from hflab.lob import Regime, synth_lob_stream
from hflab.models import hfformer_spec, lstm_spec
from hflab.train import (
    TrainConfig,
    classification_ratios,
    default_train_config,
    evaluate,
    grid_search,
    r2_score,
    temporal_split,
    train,
    weighted_classification_ratios,
    write_reports,
)


# -- metrics -------------------------------------------------------------------------

def test_r2_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert r2_score(y, y) == 1.0
    assert r2_score(np.full(3, y.mean()), y) == 0.0
    assert r2_score([1.0, 2.0, 2.0], y) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(DegenerateTargets):
        r2_score([1.0, 2.0], [5.0, 5.0])


@given(st.integers(0, 10_000), st.integers(2, 50))
def test_zero_predictor_on_centred_targets(seed, n):
    y = np.random.default_rng(seed).standard_normal(n)
    y -= y.mean()
    if np.all(np.abs(y) < 1e-300):
        return
    assert abs(r2_score(np.zeros(n), y)) <= 1e-12


def test_classification_examples():
    assert classification_ratios([1, -1, 2], [3, -2, 0.5]) == {"buy_tpr": 1.0, "sell_tpr": 1.0}
    assert classification_ratios([1, -1, 1, -1], [1, 1, -1, -1]) == {"buy_tpr": 0.5, "sell_tpr": 0.5}
    with pytest.raises(EmptyClass):
        classification_ratios([1, -1], [1, 2])
    # zero targets sit in neither class; zero predictions count for neither
    assert classification_ratios([0, 1, -1], [1, 1, -1]) == {"buy_tpr": 0.5, "sell_tpr": 1.0}


def test_weighted_examples():
    assert weighted_classification_ratios([1, -1], [2, -3]) == {"buy_w": 1.0, "sell_w": 1.0}
    w = weighted_classification_ratios([1, -1, -1], [0.4, 0.1, -1])
    assert w["buy_w"] == pytest.approx(0.8)
    # missing only the largest target hurts the weighted ratio more
    preds, targets = [-1, 1, -1], [0.4, 0.1, -1]
    assert weighted_classification_ratios(preds, targets)["buy_w"] < classification_ratios(preds, targets)["buy_tpr"]


# -- splits and config ------------------------------------------------------------------

def synth_dataset(n=600, L=10, tau=1, seed=3, snr=1.0):
    s = synth_lob_stream(seed, n, Regime(signal_snr=snr))
    return WindowDataset(build_feature_rows(s, tau), L, tau)


def test_temporal_split_hygiene():
    ds = synth_dataset(tau=3)
    tr, va, te = temporal_split(ds, 0.6, 0.2)
    assert tr.ends.max() < va.ends.min() and va.ends.max() < te.ends.min()
    # the last training target ends before the first validation window does
    assert tr.ends.max() + ds.tau < va.ends.min()
    with pytest.raises(EmptySplit):
        temporal_split(ds.subset(np.arange(3)), 0.5, 0.3)


def test_config_validation_and_defaults():
    assert default_train_config("hfformer").learning_rate == 0.04
    assert default_train_config("hfformer").batch_size == 256
    assert (default_train_config("lstm").learning_rate, default_train_config("lstm").batch_size) == (0.001, 64)
    for bad in ({"epochs": 0}, {"learning_rate": 0}, {"train_frac": 0.9, "val_frac": 0.1}, {"dtype": "float16"}):
        with pytest.raises(InvalidSpec):
            TrainConfig(**bad)


# -- training loop ------------------------------------------------------------------

def tiny_hf(L=10, **kw):
    return hfformer_spec(lookback=L, d_model=16, heads=2, head_dim=None, ffn_dim=32, decoder_hidden=16, **kw)


def test_linear_teacher_is_learned():
    rng = np.random.default_rng(0)
    n, L = 1500, 8
    rows = rng.standard_normal((n, N_FEATURES))
    X, _, _ = normalize_windows(rows, np.arange(L - 1, n), L)
    w = rng.standard_normal(N_FEATURES) / np.sqrt(N_FEATURES)
    teacher = np.zeros(n)
    teacher[L - 1 :] = X[:, -1, :] @ w * 1e-3
    mids = 100.0 * np.exp(np.concatenate([[0.0], np.cumsum(teacher[:-1])]))
    ds = WindowDataset(rows, L, 1, mids=mids)
    np.testing.assert_allclose(ds.targets, teacher[ds.ends], rtol=1e-9)
    tr, va = ds.subset(np.arange(1100)), ds.subset(np.arange(1100, len(ds)))
    res = train(tiny_hf(L), tr, va, TrainConfig(epochs=40, batch_size=64, learning_rate=0.01, patience=40,
                                                dtype="float64"))
    Xv, yv = va.batch()
    mse = np.mean((res.model.point_forecast(Xv) - yv) ** 2)
    assert mse < 0.01 * np.mean(yv ** 2)


def test_huge_learning_rate_fails_fast():
    tr, va, _ = temporal_split(synth_dataset())
    cfg = TrainConfig(epochs=10, batch_size=32, learning_rate=1e3, patience=2)
    try:
        res = train(tiny_hf(), tr, va, cfg)
    except DivergedTraining:
        return
    assert len(res.curves) <= 3


def test_training_is_deterministic_and_keeps_the_best_epoch(tmp_path):
    tr, va, te = temporal_split(synth_dataset())
    cfg = TrainConfig(epochs=4, batch_size=32, learning_rate=0.003, patience=4, seed=11)
    a = train(lstm_spec(lookback=10, lstm_layers=2), tr, va, cfg)
    b = train(lstm_spec(lookback=10, lstm_layers=2), tr, va, cfg)
    assert a.curves == b.curves
    a.model.save(tmp_path / "a.ckpt")
    b.model.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    vals = [c[2] for c in a.curves]
    assert a.model.train_meta["best_val_loss"] == pytest.approx(min(vals), rel=1e-6)
    assert a.curves[a.best_epoch - 1][2] == min(vals)
    rep = evaluate(a.model, te)
    assert 0 <= rep.buy_tpr <= 1 and 0 <= rep.sell_w <= 1 and rep.n_samples == len(te)
    write_reports([rep], tmp_path / "r.csv", tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())[0]["horizon"] == 1
    a.write_curves(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss"


def test_val_must_follow_train():
    tr, va, _ = temporal_split(synth_dataset())
    with pytest.raises(ValueError):
        train(tiny_hf(), va, tr, TrainConfig(epochs=1))


def test_grid_search(tmp_path):
    tr, va, _ = temporal_split(synth_dataset())
    cfg = TrainConfig(epochs=3, batch_size=32, patience=3)
    one = grid_search(tiny_hf(), {"learning_rate": [0.003]}, tr, va, cfg)
    assert one.best_config.learning_rate == 0.003 and len(one.leaderboard) == 1
    res = grid_search(tiny_hf(), {"learning_rate": [0.003, 1e3]}, tr, va, cfg)
    assert res.best_config.learning_rate == 0.003
    assert len(res.leaderboard) == 2 - len(res.failures)
    assert [r["rank"] for r in res.leaderboard] == list(range(1, len(res.leaderboard) + 1))
    res.write_csv(tmp_path / "g.csv")
    res.write_json(tmp_path / "g.json")
    assert (tmp_path / "g.csv").exists()
    with pytest.raises(InvalidSpec):
        grid_search(tiny_hf(), {"colour": [1]}, tr, va, cfg)
