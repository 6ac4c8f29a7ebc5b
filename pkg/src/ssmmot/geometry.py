"""Box types, coordinate conversions and overlap measures.

Pixel boxes are top-left ``(x, y, w, h)`` as in MOTChallenge files. The motion
model works on :class:`NormBox`, a center-form box divided by image size.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class BBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    @classmethod
    def checked(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """Build a box, rejecting non-finite values and non-positive sizes."""
        vals = (float(x), float(y), float(w), float(h))
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if vals[2] <= 0 or vals[3] <= 0:
            raise ValueError(f"degenerate box {vals}: width and height must be > 0")
        return cls(*vals)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h


class NormBox(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


class ImageSize(NamedTuple):
    width: int
    height: int

    @classmethod
    def checked(cls, width: int, height: int) -> "ImageSize":
        if width < 1 or height < 1:
            raise ValueError(f"image size must be >= 1, got {width}x{height}")
        return cls(int(width), int(height))


def to_norm(b: BBox, img: ImageSize) -> NormBox:
    return NormBox(
        (b.x + b.w / 2.0) / img.width,
        (b.y + b.h / 2.0) / img.height,
        b.w / img.width,
        b.h / img.height,
    )


def from_norm(n: NormBox, img: ImageSize) -> BBox:
    w = n.w * img.width
    h = n.h * img.height
    return BBox(n.cx * img.width - w / 2.0, n.cy * img.height - h / 2.0, w, h)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # (x + w) - x can round above w
    return min(1.0, inter / (a.w * a.h + b.w * b.h - inter))


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the empty fraction of the enclosing box."""
    iw = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    ih = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    cw = max(a.x + a.w, b.x + b.w) - min(a.x, b.x)
    ch = max(a.y + a.h, b.y + b.h) - min(a.y, b.y)
    enclose = cw * ch
    return min(1.0, inter / union) - max(0.0, enclose - union) / enclose


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` arrays of tlwh boxes."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ax2 = a[:, 0] + a[:, 2]
    ay2 = a[:, 1] + a[:, 3]
    bx2 = b[:, 0] + b[:, 2]
    by2 = b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, 0][:, None], b[:, 0][None])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, 1][:, None], b[:, 1][None])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.minimum(inter / union, 1.0)


def norm_array(boxes: np.ndarray, img: ImageSize) -> np.ndarray:
    """Vectorized :func:`to_norm` over an ``(N, 4)`` tlwh array."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scale = np.array([img.width, img.height, img.width, img.height], dtype=float)
    out = boxes.copy()
    out[:, :2] += boxes[:, 2:] / 2.0
    return out / scale


def denorm_array(norm: np.ndarray, img: ImageSize) -> np.ndarray:
    """Vectorized :func:`from_norm` over an ``(N, 4)`` center-form array."""
    norm = np.asarray(norm, dtype=float).reshape(-1, 4)
    scale = np.array([img.width, img.height, img.width, img.height], dtype=float)
    out = norm * scale
    out[:, :2] -= out[:, 2:] / 2.0
    return out
