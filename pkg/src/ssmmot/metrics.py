"""CLEAR (MOTA), identity (IDF1) and HOTA metrics for one sequence.

Matching follows the TrackEval conventions: CLEAR prefers continuing the
previous frame's pairs, IDF1 uses a global ID-level bipartite matching, and
HOTA averages over 19 localization thresholds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .assignment import hungarian
from .geometry import iou_matrix
from .mot import MotFrameRecord, boxes, by_frame

CLEAR_IOU = 0.5
HOTA_ALPHAS = np.arange(0.05, 0.99, 0.05)
_EPS = np.finfo(float).eps

REPORT_COLUMNS = ("hota", "det_a", "ass_a", "mota", "idf1", "fp", "fn", "idsw", "gt_count")


@dataclass
class MetricReport:
    mota: float
    idf1: float
    hota: float
    det_a: float
    ass_a: float
    fp: int
    fn: int
    idsw: int
    gt_count: int

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in REPORT_COLUMNS}


class _Seq:
    """Per-frame index arrays shared by all metrics."""

    def __init__(self, gt: list[MotFrameRecord], res: list[MotFrameRecord]):
        self.gt_ids = sorted({r.id for r in gt})
        self.tr_ids = sorted({r.id for r in res})
        gmap = {t: i for i, t in enumerate(self.gt_ids)}
        tmap = {t: i for i, t in enumerate(self.tr_ids)}
        gf, tf = by_frame(gt), by_frame(res)
        self.frames = []
        for f in sorted(set(gf) | set(tf)):
            g = sorted(gf.get(f, []), key=lambda r: r.id)
            t = sorted(tf.get(f, []), key=lambda r: r.id)
            gi = np.array([gmap[r.id] for r in g], dtype=int)
            ti = np.array([tmap[r.id] for r in t], dtype=int)
            self.frames.append((gi, ti, iou_matrix(boxes(g), boxes(t))))
        self.n_gt_dets = len(gt)
        self.n_tr_dets = len(res)


def _maximize(score: np.ndarray):
    """Max-weight matching over all pairs; keeps only strictly positive pairs."""
    assign = hungarian(-score)
    rows = np.nonzero(assign >= 0)[0]
    cols = assign[rows]
    keep = score[rows, cols] > 0
    return rows[keep], cols[keep]


def clear(gt, res) -> dict:
    """MOTA with TP/FP/FN/IDSW counts."""
    seq = gt if isinstance(gt, _Seq) else _Seq(gt, res)
    G = len(seq.gt_ids)
    prev_tr = np.full(G, -1)
    prev_step_tr = np.full(G, -1)
    tp = fp = fn = idsw = 0
    for gi, ti, sim in seq.frames:
        if len(gi) == 0:
            fp += len(ti)
            continue
        if len(ti) == 0:
            fn += len(gi)
            continue
        score = 1000.0 * (prev_step_tr[gi][:, None] == ti[None, :]) + sim
        score[sim < CLEAR_IOU - _EPS] = 0.0
        rows, cols = _maximize(score)
        mg, mt = gi[rows], ti[cols]
        idsw += int(np.sum((prev_tr[mg] >= 0) & (prev_tr[mg] != mt)))
        prev_tr[mg] = mt
        prev_step_tr[:] = -1
        prev_step_tr[mg] = mt
        tp += len(rows)
        fn += len(gi) - len(rows)
        fp += len(ti) - len(rows)
    gt_count = tp + fn
    mota = (tp - fp - idsw) / max(1, gt_count)
    return {"mota": mota, "tp": tp, "fp": fp, "fn": fn, "idsw": idsw, "gt_count": gt_count}


def mota(gt, res) -> float:
    return clear(gt, res)["mota"]


def identity(gt, res) -> dict:
    seq = gt if isinstance(gt, _Seq) else _Seq(gt, res)
    counts = np.zeros((len(seq.gt_ids), len(seq.tr_ids)))
    for gi, ti, sim in seq.frames:
        if len(gi) and len(ti):
            r, c = np.nonzero(sim >= CLEAR_IOU - _EPS)
            np.add.at(counts, (gi[r], ti[c]), 1)
    idtp = 0
    if counts.size:
        rows, cols = _maximize(counts)
        idtp = int(counts[rows, cols].sum())
    idfn = seq.n_gt_dets - idtp
    idfp = seq.n_tr_dets - idtp
    denom = 2 * idtp + idfp + idfn
    return {"idf1": 2 * idtp / denom if denom else 0.0, "idtp": idtp, "idfp": idfp, "idfn": idfn}


def idf1(gt, res) -> float:
    return identity(gt, res)["idf1"]


def hota(gt, res) -> tuple[float, float, float]:
    """Return ``(HOTA, DetA, AssA)`` averaged over the 19 alpha thresholds."""
    seq = gt if isinstance(gt, _Seq) else _Seq(gt, res)
    G, T = len(seq.gt_ids), len(seq.tr_ids)
    A = len(HOTA_ALPHAS)
    potential = np.zeros((G, T))
    gt_count = np.zeros(G)
    tr_count = np.zeros(T)
    for gi, ti, sim in seq.frames:
        if len(gi) and len(ti):
            denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
            frac = np.zeros_like(sim)
            ok = denom > _EPS
            frac[ok] = sim[ok] / denom[ok]
            potential[np.ix_(gi, ti)] += frac
        np.add.at(gt_count, gi, 1)
        np.add.at(tr_count, ti, 1)
    global_score = potential / np.maximum(gt_count[:, None] + tr_count[None, :] - potential, _EPS)

    tp = np.zeros(A)
    fn = np.zeros(A)
    fp = np.zeros(A)
    match_counts = np.zeros((A, G, T))
    for gi, ti, sim in seq.frames:
        if len(gi) == 0:
            fp += len(ti)
            continue
        if len(ti) == 0:
            fn += len(gi)
            continue
        score = global_score[np.ix_(gi, ti)] * sim
        rows, cols = _maximize(score)
        for a, alpha in enumerate(HOTA_ALPHAS):
            ok = sim[rows, cols] >= alpha - _EPS
            n = int(ok.sum())
            tp[a] += n
            fn[a] += len(gi) - n
            fp[a] += len(ti) - n
            if n:
                np.add.at(match_counts[a], (gi[rows[ok]], ti[cols[ok]]), 1)

    ass_a = np.zeros(A)
    for a in range(A):
        mc = match_counts[a]
        ass_iou = mc / np.maximum(1, gt_count[:, None] + tr_count[None, :] - mc)
        ass_a[a] = (mc * ass_iou).sum() / max(1.0, tp[a])
    det_a = tp / np.maximum(1.0, tp + fn + fp)
    h = np.sqrt(det_a * ass_a)
    return float(h.mean()), float(det_a.mean()), float(ass_a.mean())


def evaluate(gt: list[MotFrameRecord], res: list[MotFrameRecord]) -> MetricReport:
    seq = _Seq(gt, res)
    c = clear(seq, None)
    h, det_a, ass_a = hota(seq, None)
    return MetricReport(
        mota=c["mota"], idf1=identity(seq, None)["idf1"], hota=h, det_a=det_a, ass_a=ass_a,
        fp=c["fp"], fn=c["fn"], idsw=c["idsw"], gt_count=c["gt_count"],
    )
