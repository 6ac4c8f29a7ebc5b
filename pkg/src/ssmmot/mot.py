"""MOTChallenge text files and the ``seqinfo`` sidecar."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BBox, ImageSize

N_FIELDS = 10


class ParseError(ValueError):
    def __init__(self, line: int, reason: str, path=None):
        where = f"{path}:{line}" if path is not None else f"line {line}"
        super().__init__(f"{where}: {reason}")
        self.line = line
        self.reason = reason


@dataclass(frozen=True)
class MotFrameRecord:
    frame: int
    id: int
    bbox: BBox
    conf: float = 1.0
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0


@dataclass(frozen=True)
class SeqInfo:
    img: ImageSize
    frames: int


def _fmt(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def format_record(r: MotFrameRecord) -> str:
    b = r.bbox
    return ",".join([str(r.frame), str(r.id)] + [_fmt(v) for v in (b.x, b.y, b.w, b.h, r.conf, r.x, r.y, r.z)])


def parse_line(line: str, lineno: int, path=None) -> MotFrameRecord:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != N_FIELDS:
        raise ParseError(lineno, f"expected {N_FIELDS} fields, got {len(parts)}", path)
    try:
        frame_f, id_f = float(parts[0]), float(parts[1])
        vals = [float(p) for p in parts[2:]]
    except ValueError as exc:
        raise ParseError(lineno, f"non-numeric field ({exc})", path) from None
    if not (frame_f.is_integer() and id_f.is_integer()):
        raise ParseError(lineno, "frame and id must be integers", path)
    frame, tid = int(frame_f), int(id_f)
    if frame < 1:
        raise ParseError(lineno, f"frame must be >= 1, got {frame}", path)
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(lineno, "non-finite value", path)
    x, y, w, h, conf, wx, wy, wz = vals
    if w <= 0 or h <= 0:
        raise ParseError(lineno, f"non-positive box size w={w} h={h}", path)
    if tid == -1 and not 0.0 <= conf <= 1.0:
        raise ParseError(lineno, f"detection confidence {conf} outside [0, 1]", path)
    return MotFrameRecord(frame, tid, BBox(x, y, w, h), conf, wx, wy, wz)


def parse_mot(path) -> list[MotFrameRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                records.append(parse_line(line, lineno, path))
    return records


def write_mot(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(format_record(r) + "\n")


def sort_records(records) -> list[MotFrameRecord]:
    return sorted(records, key=lambda r: (r.frame, r.id))


def by_frame(records) -> dict[int, list[MotFrameRecord]]:
    out: dict[int, list[MotFrameRecord]] = defaultdict(list)
    for r in records:
        out[r.frame].append(r)
    return dict(out)


def by_id(records) -> dict[int, list[MotFrameRecord]]:
    out: dict[int, list[MotFrameRecord]] = defaultdict(list)
    for r in sorted(records, key=lambda r: (r.id, r.frame)):
        out[r.id].append(r)
    return dict(out)


def boxes(records) -> np.ndarray:
    return np.array([tuple(r.bbox) for r in records], dtype=float).reshape(-1, 4)


def write_seqinfo(path, info: SeqInfo) -> None:
    path = Path(path)
    if path.is_dir():
        path = path / "seqinfo"
    path.write_text(f"width={info.img.width}\nheight={info.img.height}\nframes={info.frames}\n")


def read_seqinfo(path) -> SeqInfo:
    """Read ``seqinfo`` from a file or from a sequence directory containing one."""
    path = Path(path)
    if path.is_dir():
        path = path / "seqinfo"
    vals = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ParseError(lineno, "expected key=value", path)
        vals[key.strip()] = val.strip()
    try:
        return SeqInfo(ImageSize.checked(int(vals["width"]), int(vals["height"])), int(vals["frames"]))
    except (KeyError, ValueError) as exc:
        raise ParseError(0, f"bad seqinfo ({exc})", path) from None
