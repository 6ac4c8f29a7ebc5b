import math

import numpy as np
import pytest

from ssmmot.geometry import ImageSize
from ssmmot.ssm import ModelConfig, init_params, load_checkpoint
from ssmmot.synthetic import SyntheticConfig
from ssmmot.training import (
    AdamState, InsufficientData, LossReport, NonFiniteLoss, Tracklet, adam_step, backward,
    clip_grads, grad_check, loss_cos, loss_pred, lr_at, sample_batch, synthetic_dataset, train,
)

CFG = ModelConfig(n_blocks=1, model_dim=8, expand_factor=2, embed_dim=4, max_len=5)
IMG = ImageSize(640, 480)


def walk(tid, length, seed):
    rng = np.random.default_rng(seed)
    c = 0.5 + np.cumsum(rng.normal(0, 0.01, (length, 2)), axis=0)
    return Tracklet(tid, np.c_[c, np.full((length, 2), 0.1)], IMG)


@pytest.fixture
def dataset():
    return [walk(i, 12, i) for i in range(4)]


# -- sampling -------------------------------------------------------------------

def test_insufficient_data():
    with pytest.raises(InsufficientData):
        sample_batch([walk(0, 20, 0)], CFG, 4, np.random.default_rng(0))
    with pytest.raises(InsufficientData):
        sample_batch([walk(0, 20, 0), walk(1, 2, 1)], CFG, 4, np.random.default_rng(0))


def test_sampling_deterministic(dataset):
    a = sample_batch(dataset, CFG, 8, np.random.default_rng(3))
    b = sample_batch(dataset, CFG, 8, np.random.default_rng(3))
    for (p, q), (r, s) in zip(a, b):
        np.testing.assert_array_equal(p.seq, r.seq)
        np.testing.assert_array_equal(q.seq, s.seq)


def test_window_invariants(dataset):
    by_id = {t.track_id: t for t in dataset}
    lengths = set()
    for anchor, partner in sample_batch(dataset, CFG, 400, np.random.default_rng(4)):
        for s in (anchor, partner):
            k = int(s.mask.sum())
            lengths.add(k)
            assert 2 <= k <= CFG.max_len
            assert s.mask[-k:].all() and not s.mask[:-k].any()
            assert np.all(s.seq[~s.mask] == 0)
            boxes = by_id[s.track_id].boxes
            starts = [i for i in range(len(boxes) - k) if np.array_equal(boxes[i:i + k], s.seq[-k:])]
            assert starts and np.array_equal(boxes[starts[0] + k], s.target)
    assert lengths == set(range(2, CFG.max_len + 1))


def test_positive_pair_fraction(dataset):
    pairs = sample_batch(dataset, CFG, 10_000, np.random.default_rng(5))
    frac = np.mean([a.track_id == b.track_id for a, b in pairs])
    assert abs(frac - 0.5) <= 0.02


def test_jitter_touches_inputs_only(dataset):
    clean = sample_batch(dataset, CFG, 16, np.random.default_rng(6))
    noisy = sample_batch(dataset, CFG, 16, np.random.default_rng(6), jitter_px=3.0)
    assert any(not np.array_equal(a.seq, b.seq) for (a, _), (b, _) in zip(clean, noisy))
    for (a, _), (b, _) in zip(clean, noisy):
        assert np.all(b.seq[~b.mask] == 0)


# -- losses ---------------------------------------------------------------------

def test_loss_pred_examples():
    t = np.array([0.4, 0.5, 0.1, 0.2])
    val, grad = loss_pred(t, t)
    assert val == pytest.approx(0.0, abs=1e-15)
    # tlwh (0,0,1,1) vs (2,2,1,1) in center form
    val, _ = loss_pred([0.5, 0.5, 1, 1], [2.5, 2.5, 1, 1])
    assert val == pytest.approx(1 + 7 / 9 + 2.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_loss_pred_gradient(seed):
    rng = np.random.default_rng(seed)
    target = np.r_[rng.uniform(0.3, 0.7, 2), rng.uniform(0.05, 0.2, 2)]
    pred = target + rng.normal(0, 0.05, 4)
    _, grad = loss_pred(pred, target)
    num = np.zeros(4)
    for k in range(4):
        e = np.zeros(4)
        e[k] = 1e-5
        num[k] = (loss_pred(pred + e, target)[0] - loss_pred(pred - e, target)[0]) / 2e-5
    rel = np.abs(grad - num) / np.maximum(np.abs(num), 1e-6)
    assert rel.max() < 1e-5


def test_loss_cos_examples():
    f = np.array([0.6, 0.8])
    assert loss_cos(f, f, True)[0] == pytest.approx(0.0)
    assert loss_cos(f, f, False)[0] == pytest.approx(1.0)
    val, gi, gj = loss_cos(np.array([1.0, 0.0]), np.array([0.0, 1.0]), False)
    assert val == 0.0 and not gi.any() and not gj.any()
    for same in (True, False):
        v, _, _ = loss_cos(f, -f, same)
        assert 0.0 <= v <= 2.0


# -- backward -------------------------------------------------------------------

def test_head_pred_gradient_zero_at_optimum():
    still = [Tracklet(i, np.tile([0.2 + 0.3 * i, 0.5, 0.1, 0.2], (8, 1)), IMG) for i in range(2)]
    params = init_params(CFG, 0)
    for k in params:
        if k.startswith("head_pred."):
            params[k] = np.zeros_like(params[k])
    batch = [(a, b) for a, b in sample_batch(still, CFG, 6, np.random.default_rng(0))
             if a.track_id == b.track_id]
    grads, rep = backward(batch, params, CFG)
    assert rep.loss_giou == pytest.approx(0.0, abs=1e-15) and rep.loss_mse == 0.0
    for k in grads:
        if k.startswith("head_pred."):
            np.testing.assert_allclose(grads[k], 0.0, atol=1e-12)


def test_duplicated_batch_same_gradient(dataset):
    params = init_params(CFG, 1)
    batch = sample_batch(dataset, CFG, 3, np.random.default_rng(1))
    g1, r1 = backward(batch, params, CFG)
    g2, r2 = backward(batch + batch, params, CFG)
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=0, atol=1e-12)
    assert r2.loss_total == pytest.approx(r1.loss_total, abs=1e-12)


def test_loss_report_decomposition(dataset):
    _, rep = backward(sample_batch(dataset, CFG, 5, np.random.default_rng(2)), init_params(CFG, 2), CFG)
    assert rep.loss_total == rep.loss_giou + rep.loss_mse + rep.loss_cos
    assert 0 <= rep.loss_giou < 2 and rep.loss_mse >= 0 and rep.loss_cos >= 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_passes(seed):
    report = grad_check(seed=seed)
    assert report.passed, report.per_tensor
    assert set(report.per_tensor) == set(init_params(
        ModelConfig(n_blocks=2, model_dim=8, expand_factor=2, embed_dim=8, max_len=4), 0))


def test_grad_check_detects_corruption():
    def corrupt(grads):
        grads = dict(grads)
        grads["blocks.1.w_gate"] = grads["blocks.1.w_gate"] * 1.5 + 1e-3
        return grads
    report = grad_check(seed=0, corrupt=corrupt)
    assert report.max_rel_error > 1e-2 and not report.passed


# -- optimizer ------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    new = adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_first_step_closed_form():
    g = np.array([3.0, -0.5, 1e-3, 0.0])
    p = {"w": np.zeros(4)}
    state = AdamState(lr=1e-2)
    new = adam_step(p, {"w": g}, state)
    np.testing.assert_allclose(new["w"], -1e-2 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.all(np.abs(new["w"]) <= 1e-2 * (1 + 1e-12))


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    grads = [{"w": rng.normal(size=3)} for _ in range(5)]
    runs = []
    for _ in range(2):
        p, state = {"w": np.ones(3)}, AdamState()
        for g in grads:
            p = adam_step(p, g, state)
        runs.append(p["w"])
    np.testing.assert_array_equal(*runs)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_clip_and_schedule():
    g = {"a": np.array([3.0, 4.0]), "b": np.array([0.0])}
    clipped = clip_grads(g, 2.5)
    assert math.sqrt(sum((v**2).sum() for v in clipped.values())) == pytest.approx(2.5)
    assert clip_grads(g, 10.0) is g
    assert lr_at(1e-3, "constant", 50, 100) == 1e-3
    assert lr_at(1e-3, "cosine", 0, 100) == pytest.approx(1e-3)
    assert lr_at(1e-3, "cosine", 50, 100) == pytest.approx(5e-4)
    with pytest.raises(ValueError):
        lr_at(1e-3, "step", 0, 1)


# -- train ----------------------------------------------------------------------

def test_train_zero_epochs_returns_init(dataset, tmp_path):
    params, hist = train(dataset, CFG, epochs=0, seed=3, checkpoint=tmp_path / "m.ckpt",
                         loss_csv=tmp_path / "loss.csv")
    init = init_params(CFG, 3)
    assert hist == [] and all(np.array_equal(params[k], init[k]) for k in init)
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert all(np.array_equal(loaded[k], init[k]) for k in init)
    assert (tmp_path / "loss.csv").read_text() == "epoch,loss_giou,loss_mse,loss_cos,loss_total\n"


def test_train_deterministic(dataset, tmp_path):
    for name in ("a", "b"):
        train(dataset, CFG, epochs=3, batch=4, lr=1e-3, seed=7, checkpoint=tmp_path / f"{name}.ckpt",
              loss_csv=tmp_path / f"{name}.csv")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[1].startswith("0,")


def test_non_finite_loss_reports_epoch(dataset):
    params = init_params(CFG, 0)
    params["proj_in.b"] = params["proj_in.b"] * np.nan
    with pytest.raises(NonFiniteLoss) as info:
        train(dataset, CFG, epochs=2, batch=4, init=params)
    assert info.value.epoch == 0


def test_learns_constant_velocity():
    ds = synthetic_dataset([SyntheticConfig(kind="linear", objects=8, frames=80, seed=s) for s in range(2)])
    _, hist = train(ds, ModelConfig(), epochs=200, batch=16, seed=0, jitter_px=0.0)
    assert hist[-1].loss_pred < 0.1 * hist[0].loss_pred
    assert all(isinstance(h, LossReport) for h in hist)
