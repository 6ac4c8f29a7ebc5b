"""Selective state-space motion model.

The model maps a short history of normalized boxes to a delta for the next box
and a unit-length trajectory embedding::

    boxes -> proj_in -> [block] * n_blocks -> last step -> head_pred / head_emb

Each block is a pre-norm residual unit. The signal branch runs through a gated
diagonal recurrence

    g_t = sigmoid(x_t @ W_gate + b_gate)
    h_t = (1 - g_t) * h_{t-1} + g_t * x_t
    y_t = c_out * h_t

and is multiplied by a SiLU gate branch before the output projection. Padded
(masked) timesteps leave the hidden state untouched, so left-padding a history
does not change any result.

Parameters live in a flat ``dict[str, np.ndarray]``; everything is float64.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import CHECKPOINT_FORMAT

INPUT_DIM = 4
LN_EPS = 1e-10
MIN_NORM_SIZE = 1e-6
EMB_NORM_FLOOR = 1e-12
# per-frame displacements in normalized units are ~1e-3..1e-2
FEATURE_SCALE = 100.0
# sigmoid(+-30) is 1e-13 away from 0/1, so gates stay strictly inside (0, 1)
GATE_CLIP = 30.0

Params = dict[str, np.ndarray]


class HistoryTooShort(ValueError):
    pass


class HistoryTooLong(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 2
    model_dim: int = 64
    expand_factor: int = 2
    embed_dim: int = 64
    max_len: int = 10

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.model_dim < 1 or self.expand_factor < 1 or self.embed_dim < 1:
            raise ValueError("model_dim, expand_factor and embed_dim must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")

    @property
    def inner_dim(self) -> int:
        return self.expand_factor * self.model_dim


@dataclass
class BlockParams:
    """Views onto one block's tensors inside a :data:`Params` dict."""

    norm_scale: np.ndarray
    norm_bias: np.ndarray
    w_in: np.ndarray
    w_gate: np.ndarray
    b_gate: np.ndarray
    c_out: np.ndarray
    w_out: np.ndarray

    @classmethod
    def from_params(cls, params: Params, i: int) -> "BlockParams":
        p = f"blocks.{i}."
        return cls(**{name: params[p + name] for name in BLOCK_FIELDS})


BLOCK_FIELDS = ("norm_scale", "norm_bias", "w_in", "w_gate", "b_gate", "c_out", "w_out")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, E, K = cfg.model_dim, cfg.inner_dim, cfg.embed_dim
    shapes: dict[str, tuple[int, ...]] = {"proj_in.w": (INPUT_DIM, D), "proj_in.b": (D,)}
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm_scale": (D,),
            p + "norm_bias": (D,),
            p + "w_in": (D, 2 * E),
            p + "w_gate": (E, E),
            p + "b_gate": (E,),
            p + "c_out": (E,),
            p + "w_out": (E, D),
        })
    for head, out in (("head_pred", INPUT_DIM), ("head_emb", K)):
        shapes.update({
            f"{head}.w1": (D, D),
            f"{head}.b1": (D,),
            f"{head}.w2": (D, out),
            f"{head}.b2": (out,),
        })
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and affine biases.

    Norm scale starts at one; norm bias and gate bias start at zero.
    """
    rng = np.random.default_rng(seed)
    params: Params = {}
    shapes = param_shapes(cfg)
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "norm_scale":
            params[name] = np.ones(shape)
        elif leaf in ("norm_bias", "b_gate"):
            params[name] = np.zeros(shape)
        elif leaf.startswith("b"):
            # bias of an affine map: same bound as its weight
            fan_in = shapes[name[:-len(leaf)] + "w" + leaf[1:]][0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else 1
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def gate(pre: np.ndarray) -> np.ndarray:
    return sigmoid(np.clip(pre, -GATE_CLIP, GATE_CLIP))


def _silu_grad(x: np.ndarray, sx: np.ndarray) -> np.ndarray:
    return sx * (1.0 + x * (1.0 - sx))


def _as_batch(seq: np.ndarray, mask: np.ndarray | None):
    seq = np.asarray(seq, dtype=float)
    squeeze = seq.ndim == 2
    if squeeze:
        seq = seq[None]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[None]
    if mask is None:
        mask = np.ones(seq.shape[:2], dtype=bool)
    return seq, np.asarray(mask, dtype=bool), squeeze


def _scan(a, g, mask, h0):
    B, T, E = a.shape
    h_all = np.empty_like(a)
    h = np.broadcast_to(h0, (B, E)).astype(float)
    for t in range(T):
        m = mask[:, t, None]
        h = np.where(m, (1.0 - g[:, t]) * h + g[:, t] * a[:, t], h)
        h_all[:, t] = h
    return h_all, h


def selective_scan(inputs, params: BlockParams, h0=None, mask=None):
    """Run the gated recurrence over ``inputs`` of shape ``(T, E)`` or ``(B, T, E)``.

    Returns ``(outputs, h_final)`` with outputs ``y_t = c_out * h_t``.
    """
    x, mask, squeeze = _as_batch(inputs, mask)
    if x.shape[1] == 0:
        raise ValueError("selective_scan needs a nonempty sequence")
    if h0 is None:
        h0 = np.zeros(x.shape[-1])
    g = gate(x @ params.w_gate + params.b_gate)
    h_all, h = _scan(x, g, mask, np.asarray(h0, dtype=float))
    y = params.c_out * h_all
    if squeeze:
        return y[0], h[0]
    return y, h


@dataclass
class BlockCache:
    z: np.ndarray
    n: np.ndarray
    rstd: np.ndarray
    u: np.ndarray
    a: np.ndarray
    bb: np.ndarray
    g_pre: np.ndarray
    g: np.ndarray
    h: np.ndarray
    y: np.ndarray
    sb: np.ndarray
    s: np.ndarray
    o: np.ndarray
    out: np.ndarray
    mask: np.ndarray


def layernorm(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize the last axis to zero mean / unit variance; returns (n, 1/std)."""
    zc = z - z.mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt((zc * zc).mean(-1, keepdims=True) + LN_EPS)
    return zc * rstd, rstd


def _block_fwd(z, mask, bp: BlockParams) -> BlockCache:
    E = bp.w_gate.shape[0]
    n, rstd = layernorm(z)
    u = n * bp.norm_scale + bp.norm_bias
    ab = u @ bp.w_in
    a, bb = ab[..., :E], ab[..., E:]
    g_pre = a @ bp.w_gate + bp.b_gate
    g = gate(g_pre)
    h, _ = _scan(a, g, mask, np.zeros(E))
    y = bp.c_out * h
    sb = sigmoid(bb)
    s = bb * sb
    o = y * s
    out = z + o @ bp.w_out
    return BlockCache(z, n, rstd, u, a, bb, g_pre, g, h, y, sb, s, o, out, mask)


def block_forward(seq, params: BlockParams, mask=None):
    """One residual block over ``(T, D)`` or ``(B, T, D)``.

    Returns ``(outputs, h_final, cache)``.
    """
    z, mask, squeeze = _as_batch(seq, mask)
    if z.shape[1] == 0:
        raise ValueError("block_forward needs a nonempty sequence")
    c = _block_fwd(z, mask, params)
    h_final = _final_state(c.h, mask)
    if squeeze:
        return c.out[0], h_final[0], c
    return c.out, h_final, c


def _final_state(h_all, mask):
    # masked slots carry the state, so the last slot always holds h_T
    return h_all[:, -1]


def _block_bwd(dout, c: BlockCache, bp: BlockParams, grads: Params, prefix: str):
    B, T, D = dout.shape
    E = bp.w_gate.shape[0]
    grads[prefix + "w_out"] = c.o.reshape(-1, E).T @ dout.reshape(-1, D)
    do = dout @ bp.w_out.T
    dy = do * c.s
    dbb = do * c.y * _silu_grad(c.bb, c.sb)
    grads[prefix + "c_out"] = (dy * c.h).sum(axis=(0, 1))
    dh_y = dy * bp.c_out

    da = np.zeros_like(c.a)
    dg = np.zeros_like(c.g)
    carry = np.zeros((B, E))
    zero = np.zeros((B, E))
    for t in range(T - 1, -1, -1):
        dh = dh_y[:, t] + carry
        m = c.mask[:, t, None]
        h_prev = c.h[:, t - 1] if t > 0 else zero
        g = c.g[:, t]
        dg[:, t] = np.where(m, dh * (c.a[:, t] - h_prev), 0.0)
        da[:, t] = np.where(m, dh * g, 0.0)
        carry = np.where(m, dh * (1.0 - g), dh)

    dg_pre = np.where(np.abs(c.g_pre) < GATE_CLIP, dg * c.g * (1.0 - c.g), 0.0)
    grads[prefix + "w_gate"] = c.a.reshape(-1, E).T @ dg_pre.reshape(-1, E)
    grads[prefix + "b_gate"] = dg_pre.sum(axis=(0, 1))
    da += dg_pre @ bp.w_gate.T

    dab = np.concatenate([da, dbb], axis=-1)
    grads[prefix + "w_in"] = c.u.reshape(-1, D).T @ dab.reshape(-1, 2 * E)
    du = dab @ bp.w_in.T
    grads[prefix + "norm_scale"] = (du * c.n).sum(axis=(0, 1))
    grads[prefix + "norm_bias"] = du.sum(axis=(0, 1))
    dn = du * bp.norm_scale
    dz = c.rstd * (dn - dn.mean(-1, keepdims=True) - c.n * (dn * c.n).mean(-1, keepdims=True))
    return dout + dz


@dataclass
class ForwardCache:
    feats: np.ndarray
    mask: np.ndarray
    blocks: list[BlockCache]
    last: np.ndarray
    pred_hidden: tuple[np.ndarray, np.ndarray, np.ndarray]
    emb_hidden: tuple[np.ndarray, np.ndarray, np.ndarray]
    emb_raw: np.ndarray
    emb_norm: np.ndarray
    embedding: np.ndarray


def _mlp_fwd(v, params, head):
    pre = v @ params[f"{head}.w1"] + params[f"{head}.b1"]
    sp = sigmoid(pre)
    act = pre * sp
    return act @ params[f"{head}.w2"] + params[f"{head}.b2"], (pre, sp, act)


def _mlp_bwd(dout, v, hidden, params, grads, head):
    pre, sp, act = hidden
    grads[f"{head}.w2"] = act.T @ dout
    grads[f"{head}.b2"] = dout.sum(0)
    dpre = (dout @ params[f"{head}.w2"].T) * _silu_grad(pre, sp)
    grads[f"{head}.w1"] = v.T @ dpre
    grads[f"{head}.b1"] = dpre.sum(0)
    return dpre @ params[f"{head}.w1"].T


def motion_features(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Scaled frame-to-frame box displacement; zero on the first real frame and on padding.

    The model sees motion, not absolute position, so it generalizes across the
    image and extrapolates constant velocity by carrying its input forward.
    """
    prev = np.concatenate([x[:, :1], x[:, :-1]], axis=1)
    prev_mask = np.concatenate([np.zeros_like(mask[:, :1]), mask[:, :-1]], axis=1)
    return np.where((mask & prev_mask)[..., None], (x - prev) * FEATURE_SCALE, 0.0)


def forward_batch(x, mask, params: Params, cfg: ModelConfig):
    """Batched forward over right-aligned histories.

    ``x`` is ``(B, T, 4)`` normalized center-form boxes, ``mask`` is ``(B, T)``
    with True for real frames; the last slot of every row must be real.
    Returns ``(pred_delta (B, 4), embedding (B, K), cache)``.
    """
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    feats = motion_features(x, mask)
    z = feats @ params["proj_in.w"] + params["proj_in.b"]
    blocks = []
    for i in range(cfg.n_blocks):
        c = _block_fwd(z, mask, BlockParams.from_params(params, i))
        blocks.append(c)
        z = c.out
    last = z[:, -1]
    delta, pred_hidden = _mlp_fwd(last, params, "head_pred")
    e, emb_hidden = _mlp_fwd(last, params, "head_emb")
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    ok = norm > EMB_NORM_FLOOR
    basis = np.zeros_like(e)
    basis[:, 0] = 1.0
    f = np.where(ok, e / np.where(ok, norm, 1.0), basis)
    cache = ForwardCache(feats, mask, blocks, last, pred_hidden, emb_hidden, e, norm, f)
    return delta, f, cache


def backward_batch(cache: ForwardCache, d_delta, d_emb, params: Params, cfg: ModelConfig) -> Params:
    """Gradients of ``sum(d_delta * delta) + sum(d_emb * embedding)`` wrt every parameter."""
    grads: Params = {}
    ok = cache.emb_norm > EMB_NORM_FLOOR
    f = cache.embedding
    safe = np.where(ok, cache.emb_norm, 1.0)
    de = np.where(ok, (d_emb - f * (f * d_emb).sum(-1, keepdims=True)) / safe, 0.0)

    dlast = _mlp_bwd(np.asarray(d_delta, float), cache.last, cache.pred_hidden, params, grads, "head_pred")
    dlast = dlast + _mlp_bwd(de, cache.last, cache.emb_hidden, params, grads, "head_emb")

    dz = np.zeros_like(cache.blocks[-1].out)
    dz[:, -1] = dlast
    for i in range(cfg.n_blocks - 1, -1, -1):
        dz = _block_bwd(dz, cache.blocks[i], BlockParams.from_params(params, i), grads, f"blocks.{i}.")
    D = dz.shape[-1]
    grads["proj_in.w"] = cache.feats.reshape(-1, INPUT_DIM).T @ dz.reshape(-1, D)
    grads["proj_in.b"] = dz.sum(axis=(0, 1))
    return {name: grads[name] for name in params}


def _check_history(history, cfg: ModelConfig) -> np.ndarray:
    h = np.asarray(history, dtype=float).reshape(-1, INPUT_DIM)
    if len(h) < 2:
        raise HistoryTooShort(f"history has {len(h)} boxes, need at least 2")
    if len(h) > cfg.max_len:
        raise HistoryTooLong(f"history has {len(h)} boxes, max_len is {cfg.max_len}")
    return h


def model_forward(history, params: Params, cfg: ModelConfig):
    """Single-history forward; returns ``(pred_delta, embedding, cache)``."""
    h = _check_history(history, cfg)
    delta, emb, cache = forward_batch(h[None], np.ones((1, len(h)), bool), params, cfg)
    return delta[0], emb[0], cache


def apply_delta(last, delta) -> np.ndarray:
    """Add a predicted delta to the last observed box, keeping sizes positive."""
    out = np.asarray(last, dtype=float) + np.asarray(delta, dtype=float)
    out[..., 2:] = np.maximum(out[..., 2:], MIN_NORM_SIZE)
    return out


def predict_next(history, params: Params, cfg: ModelConfig) -> np.ndarray:
    h = _check_history(history, cfg)
    delta, _, _ = model_forward(h, params, cfg)
    return apply_delta(h[-1], delta)


def rollout(history, params: Params, cfg: ModelConfig, k: int) -> np.ndarray:
    """Autoregressive ``k``-step prediction; returns a ``(k, 4)`` array."""
    if k < 1:
        raise ValueError("rollout needs k >= 1")
    ctx = list(_check_history(history, cfg))
    out = []
    for _ in range(k):
        nxt = predict_next(np.array(ctx), params, cfg)
        out.append(nxt)
        ctx.append(nxt)
        if len(ctx) > cfg.max_len:
            ctx.pop(0)
    return np.array(out)


def pad_histories(histories: list[np.ndarray], length: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad variable-length ``(L_i, 4)`` histories into ``(B, length, 4)`` plus mask."""
    x = np.zeros((len(histories), length, INPUT_DIM))
    mask = np.zeros((len(histories), length), dtype=bool)
    for i, h in enumerate(histories):
        n = len(h)
        x[i, length - n:] = h
        mask[i, length - n:] = True
    return x, mask


def save_checkpoint(path, params: Params, cfg: ModelConfig) -> None:
    lines = [CHECKPOINT_FORMAT]
    lines.append("config " + " ".join(f"{k}={v}" for k, v in asdict(cfg).items()))
    for name, arr in params.items():
        dims = " ".join(str(d) for d in arr.shape)
        vals = " ".join(repr(float(v)) for v in arr.ravel())
        lines.append(f"{name} dims {dims} : {vals}")
    body = ("\n".join(lines) + "\n").encode()
    digest = hashlib.sha256(body).hexdigest()
    Path(path).write_bytes(body + f"sha256 {digest}\n".encode())


def load_checkpoint(path) -> tuple[Params, ModelConfig]:
    raw = Path(path).read_bytes()
    body, sep, tail = raw.rstrip(b"\n").rpartition(b"\n")
    if not sep or not tail.startswith(b"sha256 "):
        raise CheckpointError(f"{path}: missing sha256 trailer")
    body += b"\n"
    if hashlib.sha256(body).hexdigest() != tail.split()[1].decode():
        raise CheckpointError(f"{path}: checksum mismatch")
    lines = body.decode().splitlines()
    if lines[0] != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown header {lines[0]!r}")
    if not lines[1].startswith("config "):
        raise CheckpointError(f"{path}: missing config line")
    cfg = ModelConfig(**{k: int(v) for k, v in (kv.split("=") for kv in lines[1].split()[1:])})
    params: Params = {}
    for line in lines[2:]:
        head, _, vals = line.partition(" : ")
        name, kw, *dims = head.split()
        if kw != "dims":
            raise CheckpointError(f"{path}: malformed record {name!r}")
        shape = tuple(int(d) for d in dims)
        arr = np.array([float(v) for v in vals.split()], dtype=float)
        params[name] = arr.reshape(shape)
    expected = param_shapes(cfg)
    if {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError(f"{path}: tensor shapes do not match config")
    return params, cfg
