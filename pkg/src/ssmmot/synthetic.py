"""Seeded synthetic sequences: ground truth plus noisy, occluded detections.

Motion kinds:

* ``linear`` - constant velocity, reflected at the image border
* ``sinusoid`` - oscillation around a slowly drifting anchor
* ``bounce`` - piecewise-constant velocity, new heading every 10-30 frames
* ``random_walk`` - velocity performs a clipped random walk
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BBox, ImageSize, norm_array
from .mot import MotFrameRecord, SeqInfo, write_mot, write_seqinfo

KINDS = ("linear", "sinusoid", "bounce", "random_walk")


@dataclass(frozen=True)
class SyntheticConfig:
    kind: str = "sinusoid"
    objects: int = 8
    frames: int = 300
    image: ImageSize = ImageSize(1280, 720)
    occlusion_rate: float = 0.0
    det_noise_std: float = 0.0
    seed: int = 0
    low_conf_fraction: float = 0.0
    gap_windows: int = 0
    gap_length: int = 20

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if self.objects < 1 or self.frames < 1:
            raise ValueError("objects and frames must be >= 1")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise ValueError("occlusion_rate must be in [0, 1)")
        if self.det_noise_std < 0:
            raise ValueError("det_noise_std must be >= 0")
        if not 0.0 <= self.low_conf_fraction <= 1.0:
            raise ValueError("low_conf_fraction must be in [0, 1]")
        if self.gap_windows < 0 or self.gap_length < 0:
            raise ValueError("gap_windows and gap_length must be >= 0")


def _reflect(p, v, lo, hi):
    p = p + v
    low, high = p < lo, p > hi
    p = np.where(low, 2 * lo - p, np.where(high, 2 * hi - p, p))
    v = np.where(low | high, -v, v)
    return np.clip(p, lo, hi), v


def _heading(rng, speed):
    ang = rng.uniform(0, 2 * np.pi)
    return speed * np.array([np.cos(ang), np.sin(ang)])


def _centers(kind: str, frames: int, size: np.ndarray, img: ImageSize, rng) -> np.ndarray:
    """Center trajectory ``(frames, 2)`` keeping a box of ``size`` inside the image."""
    lo = size / 2.0
    hi = np.array([img.width, img.height], dtype=float) - size / 2.0
    out = np.empty((frames, 2))
    if kind == "sinusoid":
        amp = np.array([rng.uniform(20, 80), rng.uniform(15, 60)])
        amp = np.minimum(amp, (hi - lo) / 4.0)
        omega = 2 * np.pi / rng.uniform(15, 50, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        a_lo, a_hi = lo + amp, hi - amp
        anchor = rng.uniform(a_lo, a_hi)
        drift = rng.uniform(-1.0, 1.0, size=2)
        for t in range(frames):
            out[t] = anchor + amp * np.array([np.sin(omega[0] * t + phase[0]),
                                              np.cos(omega[1] * t + phase[1])])
            anchor, drift = _reflect(anchor, drift, a_lo, a_hi)
        return out
    p = rng.uniform(lo, hi)
    if kind == "linear":
        v = _heading(rng, rng.uniform(1.5, 6.0))
        for t in range(frames):
            out[t] = p
            p, v = _reflect(p, v, lo, hi)
    elif kind == "bounce":
        v = _heading(rng, rng.uniform(3.0, 9.0))
        next_turn = int(rng.integers(10, 31))
        for t in range(frames):
            out[t] = p
            if t == next_turn:
                v = _heading(rng, rng.uniform(3.0, 9.0))
                next_turn = t + int(rng.integers(10, 31))
            p, v = _reflect(p, v, lo, hi)
    else:  # random_walk
        v = _heading(rng, rng.uniform(0.0, 4.0))
        for t in range(frames):
            out[t] = p
            v = np.clip(v + rng.normal(0, 0.5, size=2), -8.0, 8.0)
            p, v = _reflect(p, v, lo, hi)
    return out


def gen_synthetic(cfg: SyntheticConfig) -> tuple[list[MotFrameRecord], list[MotFrameRecord]]:
    """Return ``(ground_truth, detections)`` sorted by ``(frame, id)``."""
    rng = np.random.default_rng(cfg.seed)
    img = cfg.image
    tracks = []
    for _ in range(cfg.objects):
        w = rng.uniform(40, 90)
        h = min(w * rng.uniform(1.6, 2.4), img.height / 3.0)
        size = np.array([min(w, img.width / 3.0), h])
        tracks.append((size, _centers(cfg.kind, cfg.frames, size, img, rng)))

    gaps = np.zeros((cfg.objects, cfg.frames), dtype=bool)
    if cfg.gap_windows and cfg.gap_length:
        for k in range(cfg.objects):
            # spread windows over the sequence, leaving a margin at both ends
            seg = cfg.frames // (cfg.gap_windows + 1)
            for j in range(cfg.gap_windows):
                start = (j + 1) * seg - cfg.gap_length // 2 + int(rng.integers(-seg // 4, seg // 4 + 1))
                start = int(np.clip(start, 1, max(1, cfg.frames - cfg.gap_length - 1)))
                gaps[k, start:start + cfg.gap_length] = True

    gt, dets = [], []
    for t in range(cfg.frames):
        for k, (size, centers) in enumerate(tracks):
            cx, cy = centers[t]
            box = BBox(cx - size[0] / 2.0, cy - size[1] / 2.0, size[0], size[1])
            gt.append(MotFrameRecord(t + 1, k + 1, box, 1.0))
            noise = rng.normal(0.0, 1.0, size=4) * cfg.det_noise_std
            dropped = rng.random() < cfg.occlusion_rate
            low = rng.random() < cfg.low_conf_fraction
            conf = rng.uniform(0.1, 0.6) if low else rng.uniform(0.5, 1.0)
            if dropped or gaps[k, t]:
                continue
            dw, dh = noise[2], noise[3]
            w = max(box.w + dw, 1.0)
            h = max(box.h + dh, 1.0)
            x = box.x + noise[0] - (w - box.w) / 2.0
            y = box.y + noise[1] - (h - box.h) / 2.0
            dets.append(MotFrameRecord(t + 1, -1, BBox(x, y, w, h), float(conf)))
    return gt, dets


def write_sequence(out_dir, cfg: SyntheticConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt, dets = gen_synthetic(cfg)
    write_mot(gt, out / "gt.txt")
    write_mot(dets, out / "det.txt")
    write_seqinfo(out / "seqinfo", SeqInfo(cfg.image, cfg.frames))
    return out


def gt_tracklets(gt: list[MotFrameRecord], img: ImageSize, start_id: int = 0):
    """Split ground truth into contiguous per-id runs as normalized arrays.

    Returns a list of ``(track_id, (L, 4) array)``; ids are renumbered from
    ``start_id`` so runs from several sequences stay distinct.
    """
    from .mot import by_id, boxes

    runs = []
    tid = start_id
    for _, recs in sorted(by_id(gt).items()):
        frames = np.array([r.frame for r in recs])
        breaks = np.nonzero(np.diff(frames) != 1)[0] + 1
        for chunk in np.split(np.arange(len(recs)), breaks):
            arr = norm_array(boxes([recs[i] for i in chunk]), img)
            runs.append((tid, arr))
            tid += 1
    return runs
