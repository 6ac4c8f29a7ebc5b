"""Offline tracklet merging from trajectory embeddings.

One forward pass per finished tracklet yields its embedding. Pairs are gated
by temporal overlap, temporal gap and endpoint distance, the rest are compared
by cosine distance, and average-linkage agglomerative clustering decides which
tracklets share an identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import ImageSize, norm_array
from .mot import MotFrameRecord, by_id, sort_records
from .ssm import ModelConfig, Params, model_forward


class OverlapViolation(ValueError):
    pass


@dataclass(frozen=True)
class MergeConfig:
    max_gap: int = 50
    max_dist: float = 50.0
    tau_cos: float = 0.3
    linkage: str = "average"

    def __post_init__(self):
        if self.max_gap < 0 or self.max_dist < 0:
            raise ValueError("max_gap and max_dist must be >= 0")
        if not 0.0 <= self.tau_cos < 2.0:
            raise ValueError("tau_cos must be in [0, 2)")
        if self.linkage != "average":
            raise ValueError("only average linkage is supported")


@dataclass
class TrackletRecord:
    id: int
    first_frame: int
    last_frame: int
    boxes: np.ndarray                 # (last - first + 1, 4) tlwh, gaps interpolated
    embedding: np.ndarray | None = None

    @property
    def first_center(self) -> np.ndarray:
        b = self.boxes[0]
        return b[:2] + b[2:] / 2.0

    @property
    def last_center(self) -> np.ndarray:
        b = self.boxes[-1]
        return b[:2] + b[2:] / 2.0


@dataclass
class Extraction:
    records: list[TrackletRecord]
    forward_passes: int
    excluded: list[int] = field(default_factory=list)


def build_tracklets(results: list[MotFrameRecord]) -> list[TrackletRecord]:
    """Group result rows by id; frames missing inside a span are linearly interpolated."""
    out = []
    for tid, recs in sorted(by_id(results).items()):
        frames = np.array([r.frame for r in recs])
        if len(np.unique(frames)) != len(frames):
            raise OverlapViolation(f"id {tid} has several rows in one frame")
        boxes = np.array([tuple(r.bbox) for r in recs])
        span = np.arange(frames[0], frames[-1] + 1)
        filled = np.stack([np.interp(span, frames, boxes[:, k]) for k in range(4)], axis=1)
        out.append(TrackletRecord(tid, int(frames[0]), int(frames[-1]), filled))
    return out


def extract_embeddings(results: list[MotFrameRecord], params: Params, cfg: ModelConfig,
                       img: ImageSize) -> Extraction:
    """Embed each tracklet from its last ``max_len`` boxes, one forward pass apiece."""
    records = build_tracklets(results)
    ext = Extraction([], 0)
    for rec in records:
        if len(rec.boxes) < 2:
            ext.excluded.append(rec.id)
            continue
        history = norm_array(rec.boxes[-cfg.max_len:], img)
        _, emb, _ = model_forward(history, params, cfg)
        ext.forward_passes += 1
        rec.embedding = emb
        ext.records.append(rec)
    return ext


def gate_reason(a: TrackletRecord, b: TrackletRecord, cfg: MergeConfig) -> str | None:
    """Why a pair may not be merged, or None when it passes every gate."""
    if a.first_frame > b.first_frame:
        a, b = b, a
    if b.first_frame <= a.last_frame:
        return "overlap"
    gap = b.first_frame - a.last_frame
    if gap > cfg.max_gap:
        return f"gap={gap}"
    dist = float(np.linalg.norm(b.first_center - a.last_center))
    if dist > cfg.max_dist:
        return f"dist={dist:.1f}"
    return None


def gated_distance(a: TrackletRecord, b: TrackletRecord, cfg: MergeConfig) -> float | None:
    """Cosine distance between embeddings, or None if the pair is forbidden."""
    if a.embedding is None or b.embedding is None:
        raise ValueError("both tracklets need embeddings")
    if gate_reason(a, b, cfg) is not None:
        return None
    return float(1.0 - np.dot(a.embedding, b.embedding))


@dataclass
class Clustering:
    clusters: list[list[int]]
    merges: list[tuple[list[int], list[int], float]]


def cluster_matrix(ids: list[int], dist: np.ndarray, tau: float) -> Clustering:
    """Average-linkage agglomeration on a distance matrix with ``inf`` = forbidden.

    Clusters merge while their linkage distance is strictly below ``tau``; a
    cluster pair containing any forbidden cross pair never merges. Ties go to
    the pair whose smallest member ids are lowest.
    """
    groups = [[i] for i in range(len(ids))]
    merges = []
    while len(groups) > 1:
        best = None
        for p in range(len(groups)):
            for q in range(p + 1, len(groups)):
                d = dist[np.ix_(groups[p], groups[q])]
                if not np.isfinite(d).all():
                    continue
                link = float(d.mean())
                if link >= tau:
                    continue
                key = (link, *sorted((min(ids[i] for i in groups[p]), min(ids[i] for i in groups[q]))))
                if best is None or key < best[0]:
                    best = (key, p, q)
        if best is None:
            break
        (link, *_), p, q = best
        merges.append((sorted(ids[i] for i in groups[p]), sorted(ids[i] for i in groups[q]), link))
        groups[p] = groups[p] + groups[q]
        del groups[q]
    clusters = sorted(sorted(ids[i] for i in g) for g in groups)
    return Clustering(clusters, merges)


def distance_matrix(records: list[TrackletRecord], cfg: MergeConfig) -> np.ndarray:
    n = len(records)
    dist = np.full((n, n), np.inf)
    for i in range(n):
        dist[i, i] = 0.0
        for j in range(i + 1, n):
            d = gated_distance(records[i], records[j], cfg)
            if d is not None:
                dist[i, j] = dist[j, i] = d
    return dist


def cluster(records: list[TrackletRecord], cfg: MergeConfig) -> list[list[int]]:
    """Partition of tracklet ids (each cluster sorted, clusters ordered by first id)."""
    ids = [r.id for r in records]
    return cluster_matrix(ids, distance_matrix(records, cfg), cfg.tau_cos).clusters


def apply_merge(results: list[MotFrameRecord], partition: list[list[int]]) -> list[MotFrameRecord]:
    """Relabel every cluster to its smallest id; boxes are left untouched."""
    relabel = {}
    for members in partition:
        for tid in members:
            relabel[tid] = min(members)
    seen = set()
    out = []
    for r in results:
        new_id = relabel.get(r.id, r.id)
        if (r.frame, new_id) in seen:
            raise OverlapViolation(f"id {new_id} would appear twice in frame {r.frame}")
        seen.add((r.frame, new_id))
        out.append(MotFrameRecord(r.frame, new_id, r.bbox, r.conf, r.x, r.y, r.z))
    return sort_records(out)


def merge_results(results: list[MotFrameRecord], params: Params, model_cfg: ModelConfig,
                  img: ImageSize, cfg: MergeConfig) -> tuple[list[MotFrameRecord], str, Extraction]:
    """Full offline stage: embed, gate, cluster, relabel. Returns (rows, report, extraction)."""
    ext = extract_embeddings(results, params, model_cfg, img)
    recs = ext.records
    dist = distance_matrix(recs, cfg)
    ids = [r.id for r in recs]
    result = cluster_matrix(ids, dist, cfg.tau_cos)
    partition = result.clusters + [[i] for i in ext.excluded]
    merged = apply_merge(results, partition)

    lines = [
        f"tracklets {len(recs) + len(ext.excluded)}",
        f"forward_passes {ext.forward_passes}",
        f"excluded {' '.join(map(str, ext.excluded)) or '-'}",
        f"config max_gap={cfg.max_gap} max_dist={cfg.max_dist:g} tau_cos={cfg.tau_cos:g} linkage={cfg.linkage}",
        "gate_rejections:",
    ]
    for i in range(len(recs)):
        for j in range(i + 1, len(recs)):
            reason = gate_reason(recs[i], recs[j], cfg)
            if reason is not None:
                lines.append(f"  reject {recs[i].id} {recs[j].id} {reason}")
    lines.append("pair_distances:")
    for i in range(len(recs)):
        for j in range(i + 1, len(recs)):
            if math.isfinite(dist[i, j]):
                lines.append(f"  pair {recs[i].id} {recs[j].id} {dist[i, j]:.6f}")
    lines.append("merges:")
    for a, b, d in result.merges:
        lines.append(f"  merge {' '.join(map(str, a))} + {' '.join(map(str, b))} linkage={d:.6f}")
    lines.append("clusters:")
    for members in sorted(partition):
        lines.append(f"  {min(members)}: {' '.join(map(str, sorted(members)))}")
    return merged, "\n".join(lines) + "\n", ext
