"""Window sampling, losses, exact BPTT, Adam and finite-difference checking."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import ImageSize
from .ssm import (
    INPUT_DIM,
    MIN_NORM_SIZE,
    ModelConfig,
    Params,
    apply_delta,
    backward_batch,
    forward_batch,
    init_params,
    save_checkpoint,
)

log = logging.getLogger(__name__)

GRAD_CLIP_NORM = 5.0
DEFAULT_JITTER_PX = 3.0


class InsufficientData(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class Tracklet:
    """A ground-truth trajectory in normalized center form, one row per frame."""

    track_id: int
    boxes: np.ndarray
    img: ImageSize


@dataclass
class TrainSample:
    seq: np.ndarray      # (n, 4), left-padded with zeros
    mask: np.ndarray     # (n,), True on real frames
    target: np.ndarray   # (4,)
    track_id: int
    img: ImageSize


@dataclass
class LossReport:
    loss_giou: float = 0.0
    loss_mse: float = 0.0
    loss_cos: float = 0.0
    loss_total: float = 0.0

    @property
    def loss_pred(self) -> float:
        return self.loss_giou + self.loss_mse


def _window(tr: Tracklet, cfg: ModelConfig, rng: np.random.Generator,
            jitter_px: float = 0.0) -> TrainSample:
    L = len(tr.boxes)
    length = int(rng.integers(2, min(cfg.max_len, L - 1) + 1))
    start = int(rng.integers(0, L - length))
    seq = np.zeros((cfg.max_len, INPUT_DIM))
    mask = np.zeros(cfg.max_len, dtype=bool)
    seq[cfg.max_len - length:] = tr.boxes[start:start + length]
    if jitter_px > 0:
        sigma = rng.uniform(0.0, jitter_px)
        scale = sigma / np.array([tr.img.width, tr.img.height, tr.img.width, tr.img.height])
        seq[cfg.max_len - length:] += rng.normal(size=(length, INPUT_DIM)) * scale
    mask[cfg.max_len - length:] = True
    return TrainSample(seq, mask, tr.boxes[start + length].copy(), tr.track_id, tr.img)


def sample_batch(dataset: list[Tracklet], cfg: ModelConfig, batch: int,
                 rng: np.random.Generator, jitter_px: float = 0.0
                 ) -> list[tuple[TrainSample, TrainSample]]:
    """Draw ``batch`` (anchor, partner) pairs; partners share the anchor's tracklet with p=0.5.

    Each input window gets Gaussian pixel noise with a std drawn from
    ``U(0, jitter_px)``; targets stay clean.
    """
    usable = [tr for tr in dataset if len(tr.boxes) >= 3]
    if len(usable) < 2:
        raise InsufficientData(f"need >= 2 tracklets of length >= 3, have {len(usable)}")
    out = []
    for _ in range(batch):
        i = int(rng.integers(len(usable)))
        anchor = _window(usable[i], cfg, rng, jitter_px)
        if rng.random() < 0.5:
            j = i
        else:
            j = int(rng.integers(len(usable) - 1))
            j += j >= i
        out.append((anchor, _window(usable[j], cfg, rng, jitter_px)))
    return out


def _corners(b):
    half_w = b[..., 2] / 2.0
    half_h = b[..., 3] / 2.0
    return b[..., 0] - half_w, b[..., 1] - half_h, b[..., 0] + half_w, b[..., 1] + half_h


def giou_loss_grad(pred, target):
    """Row-wise ``1 - GIoU`` for center-form boxes and its gradient wrt ``pred``.

    Predicted sizes are floored at a tiny positive value (zero gradient below it);
    the MSE term still pulls such sizes back.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    size_ok = pred[:, 2:] > MIN_NORM_SIZE
    p = pred.copy()
    p[:, 2:] = np.where(size_ok, p[:, 2:], MIN_NORM_SIZE)

    px1, py1, px2, py2 = _corners(p)
    tx1, ty1, tx2, ty2 = _corners(target)
    iw_raw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih_raw = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    iw, ih = np.clip(iw_raw, 0, None), np.clip(ih_raw, 0, None)
    inter = iw * ih
    area_p = p[:, 2] * p[:, 3]
    union = area_p + target[:, 2] * target[:, 3] - inter
    cw = np.maximum(px2, tx2) - np.minimum(px1, tx1)
    ch = np.maximum(py2, ty2) - np.minimum(py1, ty1)
    enclose = cw * ch
    g = inter / union - 1.0 + union / enclose

    d_inter = 1.0 / union + inter / union**2 - 1.0 / enclose
    d_area = -inter / union**2 + 1.0 / enclose
    d_enc = -union / enclose**2

    # corner gradients: d_inter * dI/dcorner + d_enc * dC/dcorner
    x_on, y_on = iw_raw > 0, ih_raw > 0
    di_x = np.where(x_on & y_on, ih, 0.0) * d_inter
    di_y = np.where(x_on & y_on, iw, 0.0) * d_inter
    d_px1 = -di_x * (px1 >= tx1) - d_enc * ch * (px1 <= tx1)
    d_px2 = di_x * (px2 <= tx2) + d_enc * ch * (px2 >= tx2)
    d_py1 = -di_y * (py1 >= ty1) - d_enc * cw * (py1 <= ty1)
    d_py2 = di_y * (py2 <= ty2) + d_enc * cw * (py2 >= ty2)

    grad = np.empty_like(p)
    grad[:, 0] = d_px1 + d_px2
    grad[:, 1] = d_py1 + d_py2
    grad[:, 2] = (d_px2 - d_px1) / 2.0 + d_area * p[:, 3]
    grad[:, 3] = (d_py2 - d_py1) / 2.0 + d_area * p[:, 2]
    grad[:, 2:] *= size_ok
    return 1.0 - g, -grad


def loss_pred(pred_box, target) -> tuple[float, np.ndarray]:
    """``(1 - GIoU) + mean squared error`` over the four normalized coordinates."""
    pred_box = np.asarray(pred_box, dtype=float)
    target = np.asarray(target, dtype=float)
    lg, dg = giou_loss_grad(pred_box, target)
    diff = pred_box - target
    return float(lg[0] + np.mean(diff**2)), dg[0] + diff / 2.0


def loss_cos(f_i, f_j, same: bool) -> tuple[float, np.ndarray, np.ndarray]:
    """Cosine embedding loss for unit vectors; returns ``(loss, d_fi, d_fj)``."""
    f_i = np.asarray(f_i, dtype=float)
    f_j = np.asarray(f_j, dtype=float)
    cos = float(f_i @ f_j)
    if same:
        return 1.0 - cos, -f_j, -f_i
    if cos > 0:
        return cos, f_j.copy(), f_i.copy()
    return 0.0, np.zeros_like(f_i), np.zeros_like(f_j)


def _stack(batch):
    samples = [a for a, _ in batch] + [b for _, b in batch]
    x = np.stack([s.seq for s in samples])
    mask = np.stack([s.mask for s in samples])
    target = np.stack([s.target for s in samples])
    same = np.array([a.track_id == b.track_id for a, b in batch])
    return x, mask, target, same


def backward(batch, params: Params, cfg: ModelConfig) -> tuple[Params, LossReport]:
    """Gradient of the batch-mean total loss.

    Every sample in every pair contributes a prediction loss (averaged over all
    samples); each pair contributes one cosine term (averaged over pairs).
    """
    x, mask, target, same = _stack(batch)
    n_pairs = len(batch)
    n = 2 * n_pairs
    with np.errstate(over="raise", invalid="raise"):
        try:
            delta, emb, cache = forward_batch(x, mask, params, cfg)
        except FloatingPointError as exc:
            raise NonFiniteLoss(f"activation overflow: {exc}") from None
    pred = apply_delta(x[:, -1], delta)
    lg, dg = giou_loss_grad(pred, target)
    diff = pred - target
    # apply_delta floors sizes; no gradient flows through the floor
    size_live = np.ones_like(pred, dtype=bool)
    size_live[:, 2:] = (x[:, -1, 2:] + delta[:, 2:]) > MIN_NORM_SIZE
    d_delta = (dg + diff / 2.0) * size_live / n

    f_a, f_b = emb[:n_pairs], emb[n_pairs:]
    cos = (f_a * f_b).sum(-1)
    lc = np.where(same, 1.0 - cos, np.maximum(cos, 0.0))
    coef = np.where(same, -1.0, (cos > 0).astype(float)) / n_pairs
    d_emb = np.concatenate([coef[:, None] * f_b, coef[:, None] * f_a])

    report = LossReport(float(lg.mean()), float((diff**2).mean()), float(lc.mean()))
    report.loss_total = report.loss_giou + report.loss_mse + report.loss_cos
    if not math.isfinite(report.loss_total):
        raise NonFiniteLoss(f"non-finite loss {report}")
    grads = backward_batch(cache, d_delta, d_emb, params, cfg)
    if not all(np.isfinite(g).all() for g in grads.values()):
        raise NonFiniteLoss("non-finite gradient")
    return grads, report


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState) -> Params:
    """One bias-corrected Adam update; mutates ``state`` and returns new params."""
    state.step += 1
    t = state.step
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new


SCHEDULES = ("constant", "cosine")


def lr_at(base: float, schedule: str, step: int, total: int) -> float:
    """Learning rate for 0-based ``step`` of ``total``; cosine decays to zero."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))
    raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")


def clip_grads(grads: Params, max_norm: float = GRAD_CLIP_NORM) -> Params:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def train(dataset: list[Tracklet], cfg: ModelConfig, epochs: int = 500, batch: int = 32,
          lr: float = 1e-4, seed: int = 0, samples_per_tracklet: int = 1,
          checkpoint=None, loss_csv=None, init: Params | None = None,
          jitter_px: float = DEFAULT_JITTER_PX, schedule: str = "constant"
          ) -> tuple[Params, list[LossReport]]:
    """Train from ``init_params(cfg, seed)`` (or ``init``); one epoch draws
    ``samples_per_tracklet`` anchors per tracklet on average.

    Input jitter keeps every feature channel exercised (synthetic sizes never
    change otherwise), which keeps autoregressive rollouts stable.
    """
    rng = np.random.default_rng(seed)
    params = init if init is not None else init_params(cfg, seed)
    state = AdamState(lr=lr)
    history: list[LossReport] = []
    steps = max(1, math.ceil(len(dataset) * samples_per_tracklet / batch))
    for epoch in range(epochs):
        acc = LossReport()
        for _ in range(steps):
            try:
                grads, rep = backward(sample_batch(dataset, cfg, batch, rng, jitter_px), params, cfg)
            except NonFiniteLoss as exc:
                exc.epoch = epoch
                raise
            state.lr = lr_at(lr, schedule, state.step, epochs * steps)
            params = adam_step(params, clip_grads(grads), state)
            for f in fields(LossReport):
                setattr(acc, f.name, getattr(acc, f.name) + getattr(rep, f.name) / steps)
        history.append(acc)
        if epoch % 25 == 0 or epoch == epochs - 1:
            log.info("epoch %d loss %.5f (giou %.4f mse %.2e cos %.4f)", epoch,
                     acc.loss_total, acc.loss_giou, acc.loss_mse, acc.loss_cos)
    if checkpoint is not None:
        save_checkpoint(checkpoint, params, cfg)
    if loss_csv is not None:
        write_loss_csv(loss_csv, history)
    return params, history


def write_loss_csv(path, history: list[LossReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss_giou", "loss_mse", "loss_cos", "loss_total"])
        for i, r in enumerate(history):
            w.writerow([i, repr(r.loss_giou), repr(r.loss_mse), repr(r.loss_cos), repr(r.loss_total)])


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def _batch_loss(batch, params, cfg) -> float:
    x, mask, target, same = _stack(batch)
    delta, emb, _ = forward_batch(x, mask, params, cfg)
    pred = apply_delta(x[:, -1], delta)
    lg, _ = giou_loss_grad(pred, target)
    n_pairs = len(batch)
    cos = (emb[:n_pairs] * emb[n_pairs:]).sum(-1)
    lc = np.where(same, 1.0 - cos, np.maximum(cos, 0.0))
    return float(lg.mean() + ((pred - target) ** 2).mean() + lc.mean())


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(cfg: ModelConfig | None = None, seed: int = 0, step: float = 1e-5,
               corrupt=None) -> GradCheckReport:
    """Compare :func:`backward` with central differences over every parameter.

    ``corrupt`` optionally post-processes the analytic gradient dict, which lets
    tests confirm the checker notices a wrong gradient.
    """
    cfg = cfg or ModelConfig(n_blocks=2, model_dim=8, expand_factor=2, embed_dim=8, max_len=4)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    # perturb so the zero-initialized gate and norm biases are exercised too
    for name in params:
        params[name] = params[name] + rng.normal(0.0, 0.1, size=params[name].shape)
    img = ImageSize(640, 480)
    dataset = [_random_walk_tracklet(i, cfg.max_len + 4, img, rng) for i in range(3)]
    pairs = sample_batch(dataset, cfg, 2, rng)
    # force one positive and one negative pair
    pairs[0] = (pairs[0][0], _window(dataset[pairs[0][0].track_id], cfg, rng))
    other = (pairs[1][0].track_id + 1) % len(dataset)
    pairs[1] = (pairs[1][0], _window(dataset[other], cfg, rng))

    grads, _ = backward(pairs, params, cfg)
    if corrupt is not None:
        grads = corrupt(grads)
    per_tensor = {}
    for name, p in params.items():
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = _batch_loss(pairs, params, cfg)
            flat[k] = orig - step
            down = _batch_loss(pairs, params, cfg)
            flat[k] = orig
            num.reshape(-1)[k] = (up - down) / (2 * step)
        per_tensor[name] = float(relative_error(grads[name], num).max())
    return GradCheckReport(max(per_tensor.values()), per_tensor)


def _random_walk_tracklet(tid: int, length: int, img: ImageSize, rng) -> Tracklet:
    start = np.array([rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), 0.08, 0.2])
    vel = rng.normal(0, 0.01, size=4) * np.array([1, 1, 0.1, 0.1])
    steps = start + np.cumsum(np.tile(vel, (length, 1)) + rng.normal(0, 0.003, (length, 4)), axis=0)
    steps[:, 2:] = np.maximum(steps[:, 2:], 0.02)
    return Tracklet(tid, steps, img)


def load_dataset(seq_dirs) -> list[Tracklet]:
    """Tracklets from sequence directories holding ``gt.txt`` and ``seqinfo``."""
    from .mot import parse_mot, read_seqinfo
    from .synthetic import gt_tracklets

    dataset: list[Tracklet] = []
    for d in seq_dirs:
        d = Path(d)
        img = read_seqinfo(d).img
        for tid, arr in gt_tracklets(parse_mot(d / "gt.txt"), img, start_id=len(dataset)):
            dataset.append(Tracklet(tid, arr, img))
    return dataset


def synthetic_dataset(configs) -> list[Tracklet]:
    """Tracklets straight from :class:`SyntheticConfig` objects, no files involved."""
    from .synthetic import gen_synthetic, gt_tracklets

    dataset: list[Tracklet] = []
    for sc in configs:
        gt, _ = gen_synthetic(sc)
        for tid, arr in gt_tracklets(gt, sc.image, start_id=len(dataset)):
            dataset.append(Tracklet(tid, arr, sc.image))
    return dataset
