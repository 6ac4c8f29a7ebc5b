import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssmmot.ssm import (
    BlockParams, CheckpointError, HistoryTooLong, HistoryTooShort, ModelConfig, backward_batch, gate,
    block_forward, forward_batch, init_params, layernorm, load_checkpoint, model_forward,
    pad_histories, predict_next, rollout, save_checkpoint, selective_scan,
)

SMALL = ModelConfig(n_blocks=2, model_dim=8, expand_factor=2, embed_dim=6, max_len=6)


def random_params(cfg, seed, noise=0.3):
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed)
    return {k: v + rng.normal(0, noise, v.shape) for k, v in p.items()}


def random_history(rng, length):
    start = rng.uniform(0.2, 0.8, 2)
    vel = rng.normal(0, 0.01, 2)
    size = rng.uniform(0.03, 0.2, 2)
    t = np.arange(length)[:, None]
    return np.c_[start + vel * t + rng.normal(0, 0.002, (length, 2)), np.tile(size, (length, 1))]


def zero_heads(params):
    out = dict(params)
    for k in out:
        if k.startswith("head_pred."):
            out[k] = np.zeros_like(out[k])
    return out


# -- init -----------------------------------------------------------------------

def test_init_deterministic_and_seeded():
    cfg = ModelConfig()
    a, b, c = init_params(cfg, 1), init_params(cfg, 1), init_params(cfg, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
    assert a["blocks.0.w_gate"].shape == (128, 128)


def test_init_scheme():
    cfg = ModelConfig()
    p = init_params(cfg, 0)
    for i in range(cfg.n_blocks):
        assert np.all(p[f"blocks.{i}.norm_scale"] == 1.0)
        assert np.all(p[f"blocks.{i}.norm_bias"] == 0.0)
        assert np.all(p[f"blocks.{i}.b_gate"] == 0.0)
    assert np.abs(p["blocks.0.w_in"]).max() <= 1 / np.sqrt(cfg.model_dim)
    assert np.abs(p["proj_in.w"]).max() <= 0.5
    assert abs(p["blocks.0.w_in"].mean()) < 0.01


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_blocks=0)
    with pytest.raises(ValueError):
        ModelConfig(max_len=1)


# -- scan -----------------------------------------------------------------------

def _block(E, w_gate=None, b_gate=None, c_out=None):
    D = 3
    return BlockParams(np.ones(D), np.zeros(D), np.zeros((D, 2 * E)),
                       np.zeros((E, E)) if w_gate is None else w_gate,
                       np.zeros(E) if b_gate is None else b_gate,
                       np.ones(E) if c_out is None else c_out, np.zeros((E, D)))


def test_scan_half_gate():
    x = np.array([[2.0, -4.0, 1.0]])
    c = np.array([1.0, 2.0, 3.0])
    y, h = selective_scan(x, _block(3, c_out=c), h0=np.zeros(3))
    np.testing.assert_allclose(h, 0.5 * x[0])
    np.testing.assert_allclose(y[0], c * 0.5 * x[0])


def test_scan_closed_gate_carries_state():
    rng = np.random.default_rng(0)
    h0 = rng.normal(size=4)
    y, h = selective_scan(rng.normal(size=(6, 4)), _block(4, b_gate=np.full(4, -80.0)), h0=h0)
    np.testing.assert_allclose(h, h0, atol=1e-12)
    np.testing.assert_allclose(y, np.tile(h0, (6, 1)), atol=1e-12)


def test_scan_fixed_point():
    x = np.array([0.3, -1.2, 5.0])
    rng = np.random.default_rng(1)
    bp = _block(3, w_gate=rng.normal(size=(3, 3)))
    y, h = selective_scan(np.tile(x, (7, 1)), bp, h0=x)
    np.testing.assert_allclose(y, np.tile(x, (7, 1)), atol=1e-12)


def test_masked_slots_keep_state():
    rng = np.random.default_rng(2)
    bp = _block(3, w_gate=rng.normal(size=(3, 3)))
    x = rng.normal(size=(5, 3))
    mask = np.array([True, False, True, False, False])
    y, h = selective_scan(x, bp, mask=mask)
    np.testing.assert_array_equal(y[1], y[0])
    np.testing.assert_array_equal(y[4], y[2])
    y2, _ = selective_scan(x[[0, 2]], bp)
    np.testing.assert_allclose(h, y2[-1], atol=1e-15)


scan_case = st.tuples(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 6),
                      st.floats(0.1, 5.0))


@given(scan_case)
def test_gate_range_and_convexity(case):
    seed, T, E, scale = case
    rng = np.random.default_rng(seed)
    bp = _block(E, w_gate=rng.normal(0, scale, (E, E)), b_gate=rng.normal(0, scale, E))
    x = rng.normal(0, scale, (T, E))
    h0 = rng.normal(0, scale, E)
    g = gate(x @ bp.w_gate + bp.b_gate)
    assert np.all((g > 0) & (g < 1))
    y, _ = selective_scan(x, bp, h0=h0)
    pool = np.vstack([h0, x])
    assert np.all(y >= pool.min(0) - 1e-12) and np.all(y <= pool.max(0) + 1e-12)


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_decay_and_input_weights_sum_to_one(seed, T):
    cfg = SMALL
    rng = np.random.default_rng(seed)
    params = random_params(cfg, seed)
    bp = BlockParams.from_params(params, 0)
    z = rng.normal(size=(T, cfg.model_dim))
    _, _, c = block_forward(z, bp)
    a_bar, b_bar = 1.0 - c.g, c.g
    np.testing.assert_array_equal(a_bar + b_bar, np.ones_like(c.g))
    assert np.all((c.g > 0) & (c.g < 1))
    # the cached states follow h_t = a_bar * h_{t-1} + b_bar * a_t exactly
    h_prev = np.zeros(cfg.inner_dim)
    for t in range(T):
        h_prev = a_bar[0, t] * h_prev + b_bar[0, t] * c.a[0, t]
        np.testing.assert_allclose(c.h[0, t], h_prev, rtol=0, atol=1e-14)


# -- block ----------------------------------------------------------------------

def test_block_residual_identity_and_layernorm():
    rng = np.random.default_rng(3)
    params = random_params(SMALL, 3)
    params["blocks.0.w_out"] = np.zeros_like(params["blocks.0.w_out"])
    z = rng.normal(size=(5, SMALL.model_dim)) * 3 + 1
    out, _, c = block_forward(z, BlockParams.from_params(params, 0))
    np.testing.assert_array_equal(out, z)
    n, _ = layernorm(z)
    np.testing.assert_allclose(n.mean(-1), 0, atol=1e-6)
    np.testing.assert_allclose(n.var(-1), 1, atol=1e-6)
    np.testing.assert_allclose(c.n[0], n)
    _, _, c1 = block_forward(z[:1], BlockParams.from_params(params, 0))
    assert c1.h.shape[1] == 1 and c1.g.shape[1] == 1 and c1.out.shape[1] == 1


@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(0, 5))
def test_causality(seed, T, t_raw):
    t = t_raw % T
    rng = np.random.default_rng(seed)
    params = random_params(SMALL, seed)
    x = np.stack([random_history(rng, SMALL.max_len)])
    mask = np.ones((1, SMALL.max_len), bool)
    _, _, c0 = forward_batch(x, mask, params, SMALL)
    x2 = x.copy()
    x2[0, t] += rng.normal(0, 0.05, 4)
    _, _, c1 = forward_batch(x2, mask, params, SMALL)
    # the displacement feature at t+... only reaches slots >= t
    for b0, b1 in zip(c0.blocks, c1.blocks):
        np.testing.assert_array_equal(b0.out[:, :t], b1.out[:, :t])


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_padding_invariance(seed, L):
    cfg = SMALL
    rng = np.random.default_rng(seed)
    params = random_params(cfg, seed)
    hist = random_history(rng, L)
    x_pad, m_pad = pad_histories([hist], cfg.max_len)
    d0, e0, c0 = forward_batch(hist[None], np.ones((1, L), bool), params, cfg)
    d1, e1, c1 = forward_batch(x_pad, m_pad, params, cfg)
    np.testing.assert_allclose(d1, d0, rtol=0, atol=1e-9)
    np.testing.assert_allclose(e1, e0, rtol=0, atol=1e-9)
    dd = rng.normal(size=d0.shape)
    de = rng.normal(size=e0.shape)
    g0 = backward_batch(c0, dd, de, params, cfg)
    g1 = backward_batch(c1, dd, de, params, cfg)
    for k in g0:
        np.testing.assert_allclose(g1[k], g0[k], rtol=0, atol=1e-9)


# -- model ----------------------------------------------------------------------

def test_model_forward_contract(rng):
    params = random_params(SMALL, 4)
    hist = random_history(rng, 4)
    delta, emb, _ = model_forward(hist, params, SMALL)
    assert delta.shape == (4,) and emb.shape == (SMALL.embed_dim,)
    assert np.linalg.norm(emb) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(HistoryTooShort):
        model_forward(hist[:1], params, SMALL)
    with pytest.raises(HistoryTooLong):
        model_forward(random_history(rng, SMALL.max_len + 1), params, SMALL)


def test_zero_head_predicts_last_box(rng):
    params = zero_heads(random_params(SMALL, 5))
    hist = random_history(rng, 5)
    delta, _, _ = model_forward(hist, params, SMALL)
    np.testing.assert_array_equal(delta, np.zeros(4))
    np.testing.assert_array_equal(predict_next(hist, params, SMALL), hist[-1])
    np.testing.assert_array_equal(rollout(hist, params, SMALL, 3), np.tile(hist[-1], (3, 1)))


def test_embedding_fallback_basis_vector(rng):
    params = random_params(SMALL, 6)
    for k in ("head_emb.w2", "head_emb.b2"):
        params[k] = np.zeros_like(params[k])
    _, emb, _ = model_forward(random_history(rng, 3), params, SMALL)
    expected = np.zeros(SMALL.embed_dim)
    expected[0] = 1.0
    np.testing.assert_array_equal(emb, expected)


def test_rollout_base_case_and_window(rng):
    params = random_params(SMALL, 7, noise=0.05)
    hist = random_history(rng, SMALL.max_len)
    np.testing.assert_array_equal(rollout(hist, params, SMALL, 1)[0], predict_next(hist, params, SMALL))
    steps = rollout(hist, params, SMALL, 4)
    ctx = np.vstack([hist, steps[:3]])[-SMALL.max_len:]
    np.testing.assert_array_equal(steps[3], predict_next(ctx, params, SMALL))
    assert np.all(steps[:, 2:] > 0)


def test_forward_deterministic(rng):
    params = random_params(SMALL, 8)
    x, m = pad_histories([random_history(rng, 3), random_history(rng, 6)], SMALL.max_len)
    a = forward_batch(x, m, params, SMALL)
    b = forward_batch(x, m, params, SMALL)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


# -- checkpoint -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = random_params(SMALL, 9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, SMALL)
    loaded, cfg = load_checkpoint(path)
    assert cfg == SMALL
    assert list(loaded) == list(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])
    text = path.read_text().splitlines()
    assert text[0] == "ssmmot-ckpt v1"
    assert text[-1].startswith("sha256 ")
    save_checkpoint(tmp_path / "again.ckpt", loaded, cfg)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_tamper_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, random_params(SMALL, 10), SMALL)
    raw = bytearray(path.read_bytes())
    i = raw.index(b" : ") + 4
    raw[i] = ord("9") if raw[i] != ord("9") else ord("8")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text("ssmmot-ckpt v1\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
