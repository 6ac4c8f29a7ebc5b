"""Constant-velocity Kalman filter over ``(cx, cy, aspect, h)`` (SORT/ByteTrack setup)."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .geometry import BBox

STD_WEIGHT_POSITION = 1.0 / 20
STD_WEIGHT_VELOCITY = 1.0 / 160

_F = np.eye(8)
_F[:4, 4:] = np.eye(4)
_H = np.eye(4, 8)


class NumericalFailure(ArithmeticError):
    pass


class KFState(NamedTuple):
    mean: np.ndarray
    covariance: np.ndarray


def box_to_xyah(b: BBox) -> np.ndarray:
    return np.array([b.x + b.w / 2.0, b.y + b.h / 2.0, b.w / b.h, b.h])


def xyah_to_box(m: np.ndarray) -> BBox:
    h = max(float(m[3]), 1e-6)
    w = max(float(m[2]) * h, 1e-6)
    return BBox(float(m[0]) - w / 2.0, float(m[1]) - h / 2.0, w, h)


def kf_init(b: BBox) -> KFState:
    mean = np.r_[box_to_xyah(b), np.zeros(4)]
    h = b.h
    std = np.array([
        2 * STD_WEIGHT_POSITION * h, 2 * STD_WEIGHT_POSITION * h, 1e-2, 2 * STD_WEIGHT_POSITION * h,
        10 * STD_WEIGHT_VELOCITY * h, 10 * STD_WEIGHT_VELOCITY * h, 1e-5, 10 * STD_WEIGHT_VELOCITY * h,
    ])
    return KFState(mean, np.diag(std**2))


def kf_predict(s: KFState) -> KFState:
    h = s.mean[3]
    std = np.array([
        STD_WEIGHT_POSITION * h, STD_WEIGHT_POSITION * h, 1e-2, STD_WEIGHT_POSITION * h,
        STD_WEIGHT_VELOCITY * h, STD_WEIGHT_VELOCITY * h, 1e-5, STD_WEIGHT_VELOCITY * h,
    ])
    mean = _F @ s.mean
    cov = _F @ s.covariance @ _F.T + np.diag(std**2)
    return KFState(mean, (cov + cov.T) / 2.0)


def kf_update(s: KFState, z: BBox) -> KFState:
    h = s.mean[3]
    r = np.diag(np.array([STD_WEIGHT_POSITION * h, STD_WEIGHT_POSITION * h, 1e-1,
                          STD_WEIGHT_POSITION * h]) ** 2)
    P = s.covariance
    S = _H @ P @ _H.T + r
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericalFailure("innovation covariance is not positive definite") from None
    PHt = P @ _H.T
    # K = P H^T S^-1 via two triangular solves
    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, PHt.T)).T
    innovation = box_to_xyah(z) - _H @ s.mean
    mean = s.mean + gain @ innovation
    # Joseph form keeps the covariance symmetric PSD
    IKH = np.eye(8) - gain @ _H
    cov = IKH @ P @ IKH.T + gain @ r @ gain.T
    if not np.isfinite(mean).all() or not np.isfinite(cov).all():
        raise NumericalFailure("non-finite Kalman state")
    return KFState(mean, (cov + cov.T) / 2.0)


def kf_box(s: KFState) -> BBox:
    return xyah_to_box(s.mean[:4])


def kf_multi_predict(s: KFState, k: int) -> list[BBox]:
    """Boxes for the next ``k`` frames by repeated prediction (no updates)."""
    out = []
    for _ in range(k):
        s = kf_predict(s)
        out.append(kf_box(s))
    return out


def kf_fit(history: list[BBox]) -> KFState:
    """Initialize on the first box, then predict/update through the rest."""
    s = kf_init(history[0])
    for b in history[1:]:
        s = kf_update(kf_predict(s), b)
    return s
