"""BYTE two-stage association, track lifecycle and the online tracking loop."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .assignment import hungarian
from .geometry import BBox, ImageSize, denorm_array, iou_matrix, norm_array
from .kalman import KFState, kf_box, kf_init, kf_predict, kf_update
from .mot import MotFrameRecord, by_frame, sort_records
from .ssm import ModelConfig, Params, apply_delta, forward_batch, pad_histories


class FrameMismatch(ValueError):
    pass


class TrackState(enum.Enum):
    TENTATIVE = "tentative"
    ACTIVE = "active"
    LOST = "lost"
    REMOVED = "removed"


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float
    frame: int


@dataclass
class Track:
    id: int
    history: deque
    state: TrackState
    motion: Any
    score: float
    frames_since_update: int = 0
    hits: int = 1
    pred: BBox | None = None
    pred_norm: Any = None

    @property
    def last_box(self) -> BBox:
        return self.history[-1][1]


@dataclass(frozen=True)
class AssociationConfig:
    tau_high: float = 0.6
    tau_low: float = 0.1
    iou_gate_high: float = 0.3
    iou_gate_low: float = 0.5
    max_age: int = 30
    min_hits: int = 3
    new_track_score: float = 0.7
    history_len: int = 30

    def __post_init__(self):
        if not 0.0 <= self.tau_low < self.tau_high <= 1.0:
            raise ValueError("need 0 <= tau_low < tau_high <= 1")
        if self.max_age < 0 or self.min_hits < 1 or self.history_len < 1:
            raise ValueError("max_age >= 0, min_hits >= 1 and history_len >= 1 required")


class MotionModel(Protocol):
    def start(self, box: BBox) -> Any: ...
    def predict(self, tracks: list[Track]) -> list[BBox]: ...
    def update(self, track: Track, box: BBox) -> None: ...
    def miss(self, track: Track) -> None: ...


class KalmanMotion:
    """Constant-velocity Kalman filter per track."""

    def start(self, box: BBox) -> KFState:
        return kf_init(box)

    def predict(self, tracks):
        out = []
        for t in tracks:
            t.motion = kf_predict(t.motion)
            out.append(kf_box(t.motion))
        return out

    def update(self, track, box):
        track.motion = kf_update(track.motion, box)

    def miss(self, track):
        pass


class SSMMotion:
    """Learned motion model; unmatched tracks feed their own predictions back (rollout)."""

    def __init__(self, params: Params, cfg: ModelConfig, img: ImageSize):
        self.params = params
        self.cfg = cfg
        self.img = img
        self.forward_calls = 0

    def start(self, box: BBox) -> deque:
        return deque(norm_array([box], self.img), maxlen=self.cfg.max_len)

    def predict(self, tracks):
        if not tracks:
            return []
        ctx = [np.array(t.motion) for t in tracks]
        out = np.array([c[-1] for c in ctx])
        idx = [i for i, c in enumerate(ctx) if len(c) >= 2]
        if idx:
            x, mask = pad_histories([ctx[i] for i in idx], self.cfg.max_len)
            delta, _, _ = forward_batch(x, mask, self.params, self.cfg)
            self.forward_calls += 1
            out[idx] = apply_delta(x[:, -1], delta)
        for t, row in zip(tracks, out):
            t.pred_norm = row
        return [BBox(*b) for b in denorm_array(out, self.img)]

    def update(self, track, box):
        track.motion.append(norm_array([box], self.img)[0])

    def miss(self, track):
        track.motion.append(track.pred_norm)


def iou_cost(pred_boxes, det_boxes, gate: float) -> np.ndarray:
    """``1 - IoU`` with pairs below ``gate`` IoU set to ``inf``."""
    sim = iou_matrix(pred_boxes, det_boxes)
    return np.where(sim >= gate, 1.0 - sim, np.inf)


def _associate(tracks, dets, gate):
    if not tracks or not dets:
        return [], list(range(len(tracks))), list(range(len(dets)))
    cost = iou_cost([tuple(t.pred) for t in tracks], [tuple(d.bbox) for d in dets], gate)
    assign = hungarian(cost)
    pairs = [(r, int(c)) for r, c in enumerate(assign) if c >= 0]
    used = {c for _, c in pairs}
    return (pairs, [r for r, c in enumerate(assign) if c < 0],
            [j for j in range(len(dets)) if j not in used])


@dataclass
class ByteTracker:
    cfg: AssociationConfig
    motion: MotionModel
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 1
    frame: int = 0

    def step(self, frame: int, detections: list[Detection]) -> list[MotFrameRecord]:
        """Advance one frame; returns result rows for Active tracks matched this frame."""
        if frame <= self.frame:
            raise FrameMismatch(f"frame {frame} does not follow frame {self.frame}")
        if any(d.frame != frame for d in detections):
            raise FrameMismatch(f"detections from several frames passed for frame {frame}")
        first = self.frame == 0
        self.frame = frame
        cfg = self.cfg

        live = [t for t in self.tracks if t.state is not TrackState.REMOVED]
        for t, box in zip(live, self.motion.predict(live)):
            t.pred = box

        high = [d for d in detections if d.score >= cfg.tau_high]
        low = [d for d in detections if cfg.tau_low <= d.score < cfg.tau_high]
        matched: list[tuple[Track, Detection]] = []

        pool = [t for t in live if t.state in (TrackState.ACTIVE, TrackState.LOST)]
        pairs, rest, free_high = _associate(pool, high, cfg.iou_gate_high)
        matched += [(pool[r], high[c]) for r, c in pairs]

        second = [pool[r] for r in rest if pool[r].state is TrackState.ACTIVE]
        pairs, _, _ = _associate(second, low, cfg.iou_gate_low)
        matched += [(second[r], low[c]) for r, c in pairs]

        tentative = [t for t in live if t.state is TrackState.TENTATIVE]
        remaining = [high[j] for j in free_high]
        pairs, _, unused = _associate(tentative, remaining, cfg.iou_gate_high)
        matched += [(tentative[r], remaining[c]) for r, c in pairs]

        matched_ids = set()
        for t, d in matched:
            matched_ids.add(t.id)
            self.motion.update(t, d.bbox)
            t.history.append((frame, d.bbox))
            t.score = d.score
            t.frames_since_update = 0
            t.hits += 1
            if t.state is TrackState.LOST or (
                t.state is TrackState.TENTATIVE and t.hits >= cfg.min_hits
            ):
                t.state = TrackState.ACTIVE

        for t in live:
            if t.id in matched_ids:
                continue
            if t.state is TrackState.TENTATIVE:
                t.state = TrackState.REMOVED
                continue
            t.frames_since_update += 1
            self.motion.miss(t)
            t.state = TrackState.LOST
            if t.frames_since_update > cfg.max_age:
                t.state = TrackState.REMOVED

        for j in unused:
            d = remaining[j]
            if d.score < cfg.new_track_score:
                continue
            state = TrackState.ACTIVE if first or cfg.min_hits <= 1 else TrackState.TENTATIVE
            hist = deque([(frame, d.bbox)], maxlen=cfg.history_len)
            live.append(Track(self.next_id, hist, state, self.motion.start(d.bbox), d.score))
            self.next_id += 1

        self.tracks = [t for t in live if t.state is not TrackState.REMOVED]
        return [
            MotFrameRecord(frame, t.id, t.last_box, t.score)
            for t in sorted(self.tracks, key=lambda t: t.id)
            if t.state is TrackState.ACTIVE and t.frames_since_update == 0
        ]


def byte_step(tracker: ByteTracker, detections: list[Detection], frame: int | None = None):
    """Functional alias for :meth:`ByteTracker.step`; returns ``(tracks, emitted)``."""
    if frame is None:
        if not detections:
            frame = tracker.frame + 1
        else:
            frame = detections[0].frame
    emitted = tracker.step(frame, detections)
    return tracker.tracks, emitted


def track_sequence(detections: list[MotFrameRecord], motion: MotionModel,
                   cfg: AssociationConfig | None = None, frames: int | None = None
                   ) -> list[MotFrameRecord]:
    """Run the tracker over every frame ``1..frames`` and collect result rows."""
    cfg = cfg or AssociationConfig()
    per_frame = by_frame(detections)
    last = max([frames or 0] + list(per_frame))
    tracker = ByteTracker(cfg, motion)
    out: list[MotFrameRecord] = []
    for f in range(1, last + 1):
        dets = [Detection(r.bbox, r.conf, r.frame) for r in per_frame.get(f, [])]
        out.extend(tracker.step(f, dets))
    return sort_records(out)
