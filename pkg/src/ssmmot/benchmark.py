"""Multi-horizon prediction accuracy: learned model rollout vs Kalman multi-step predict."""

from __future__ import annotations

import numpy as np

from .geometry import BBox, denorm_array, iou_matrix
from .kalman import kf_fit, kf_multi_predict
from .ssm import ModelConfig, Params, apply_delta, forward_batch, pad_histories
from .training import Tracklet


def _windows(dataset: list[Tracklet], history: int, horizons: int, stride: int):
    for tr in dataset:
        L = len(tr.boxes)
        for s in range(0, L - history - horizons + 1, stride):
            yield tr, s


def ssm_rollout_batch(histories: np.ndarray, params: Params, cfg: ModelConfig, k: int) -> np.ndarray:
    """Batched autoregressive rollout of ``(B, L, 4)`` normalized histories -> ``(B, k, 4)``."""
    ctx = np.asarray(histories, dtype=float)
    out = []
    for _ in range(k):
        x, mask = pad_histories(list(ctx), cfg.max_len)
        delta, _, _ = forward_batch(x, mask, params, cfg)
        nxt = apply_delta(ctx[:, -1], delta)
        out.append(nxt)
        ctx = np.concatenate([ctx, nxt[:, None]], axis=1)[:, -cfg.max_len:]
    return np.stack(out, axis=1)


def prediction_ious(dataset: list[Tracklet], params: Params | None, cfg: ModelConfig,
                    horizons: int = 5, stride: int = 5) -> dict[str, np.ndarray]:
    """Mean IoU against ground truth at horizons ``1..horizons`` for each motion model.

    Both models see the same ``cfg.max_len``-frame history; the Kalman filter is
    initialized on its first box and updated through the rest.
    """
    n = cfg.max_len
    wins = list(_windows(dataset, n, horizons, stride))
    if not wins:
        raise ValueError("no tracklet long enough for the requested history and horizons")
    kf_iou = np.zeros((len(wins), horizons))
    ssm_iou = np.zeros((len(wins), horizons))
    hist = np.stack([tr.boxes[s:s + n] for tr, s in wins])
    if params is not None:
        ssm_pred = ssm_rollout_batch(hist, params, cfg, horizons)
    for i, (tr, s) in enumerate(wins):
        px_hist = denorm_array(tr.boxes[s:s + n], tr.img)
        truth = denorm_array(tr.boxes[s + n:s + n + horizons], tr.img)
        state = kf_fit([BBox(*b) for b in px_hist])
        kf = np.array([tuple(b) for b in kf_multi_predict(state, horizons)])
        kf_iou[i] = np.diag(iou_matrix(kf, truth))
        if params is not None:
            ssm_iou[i] = np.diag(iou_matrix(denorm_array(ssm_pred[i], tr.img), truth))
    out = {"kalman": kf_iou.mean(0)}
    if params is not None:
        out["ssm"] = ssm_iou.mean(0)
    return out
