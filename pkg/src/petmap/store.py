"""Append-only, file-backed storage of detection and rectangle records.

Layout under the store root::

    rectangles/2024-05-01.jsonl
    detections/2024-05-01.jsonl
    groups/2024-05-01.jsonl

``groups`` holds one tick per fused camera group, including groups that
produced no rectangle, so a later replay sees every vacant update too.

One JSON object per line, one segment file per UTC day.  A record is
durable once its trailing newline is on disk; a torn last line (crash
mid-append) is ignored by readers and cut off by the next writer.  Each
segment keeps an in-memory sparse index of ``(timestamp, byte offset)``
pairs so range queries on time-ordered segments seek instead of scanning.
"""

from __future__ import annotations

import bisect
import datetime as dt
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from petmap.errors import InvalidRange, StorageFailure
from petmap.geometry import RotatedRect

logger = logging.getLogger(__name__)

DAY_MS = 86_400_000
INDEX_STRIDE = 64
_TS_FIELD = re.compile(rb'"timestamp_ms":\s*(-?\d+)')


@dataclass(frozen=True)
class RectangleRecord:
    timestamp_ms: int
    corners: tuple
    camera_support: int
    mean_score: float

    def __post_init__(self):
        # plain float math: this runs once per stored record on every query
        try:
            c = tuple((float(x), float(y)) for x, y in self.corners)
        except (TypeError, ValueError):
            c = ()
        if len(c) != 4:
            c = tuple(map(tuple, np.asarray(self.corners, dtype=float).reshape(4, 2).tolist()))
        (x0, y0), (x1, y1), (x2, y2), (x3, y3) = c
        if not math.isfinite(x0 + y0 + x1 + y1 + x2 + y2 + x3 + y3):
            raise ValueError("corners must be finite")
        # opposite sides equal and adjacent sides perpendicular, within 0.5 px
        ax, ay, bx, by = x1 - x0, y1 - y0, x2 - x1, y2 - y1
        if math.hypot(ax + x3 - x2, ay + y3 - y2) > 0.5 or math.hypot(bx + x0 - x3, by + y0 - y3) > 0.5:
            raise ValueError("corners do not form a rectangle")
        n = max(math.hypot(ax, ay), math.hypot(bx, by))
        if n > 0 and abs(ax * bx + ay * by) > 0.5 * n:
            raise ValueError("corners do not form a rectangle")
        object.__setattr__(self, "timestamp_ms", int(self.timestamp_ms))
        object.__setattr__(self, "corners", c)
        object.__setattr__(self, "camera_support", int(self.camera_support))
        object.__setattr__(self, "mean_score", float(self.mean_score))

    @classmethod
    def from_fitted(cls, fitted) -> RectangleRecord:
        return cls(fitted.timestamp_ms, fitted.rect.corners(), fitted.camera_support, fitted.mean_score)

    @property
    def rect(self) -> RotatedRect:
        return RotatedRect.from_corners(self.corners)

    def to_dict(self) -> dict:
        return {
            "timestamp_ms": self.timestamp_ms,
            "corners": [list(p) for p in self.corners],
            "camera_support": self.camera_support,
            "mean_score": self.mean_score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RectangleRecord:
        return cls(d["timestamp_ms"], d["corners"], d["camera_support"], d["mean_score"])


@dataclass(frozen=True)
class DetectionRecord:
    camera_id: int
    timestamp_ms: int
    polygons: tuple = ()

    def __post_init__(self):
        if int(self.timestamp_ms) <= 0:
            raise ValueError("timestamp_ms must be positive")
        polys = tuple(tuple(tuple(map(float, v)) for v in poly) for poly in self.polygons)
        if not all(np.isfinite(v).all() for poly in polys for v in poly):
            raise ValueError("polygon vertices must be finite")
        object.__setattr__(self, "camera_id", int(self.camera_id))
        object.__setattr__(self, "timestamp_ms", int(self.timestamp_ms))
        object.__setattr__(self, "polygons", polys)

    @classmethod
    def from_frame(cls, frame) -> DetectionRecord:
        return cls(frame.camera_id, frame.timestamp_ms, [np.asarray(p).tolist() for p in frame.polygons])

    def to_frame(self):
        from petmap.sync import DetectionFrame

        return DetectionFrame(self.camera_id, self.timestamp_ms, self.polygons)

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "timestamp_ms": self.timestamp_ms,
            "polygons": [[list(v) for v in poly] for poly in self.polygons],
        }

    @classmethod
    def from_dict(cls, d: dict) -> DetectionRecord:
        return cls(d["camera_id"], d["timestamp_ms"], d["polygons"])


@dataclass(frozen=True)
class GroupRecord:
    timestamp_ms: int
    camera_ids: tuple
    rectangles: int = 0

    def __post_init__(self):
        ids = tuple(sorted(int(c) for c in self.camera_ids))
        if len(set(ids)) != len(ids):
            raise ValueError("camera ids must be distinct")
        if int(self.rectangles) < 0:
            raise ValueError("rectangle count must be non-negative")
        object.__setattr__(self, "timestamp_ms", int(self.timestamp_ms))
        object.__setattr__(self, "camera_ids", ids)
        object.__setattr__(self, "rectangles", int(self.rectangles))

    @classmethod
    def from_group(cls, group, n_rectangles: int = 0) -> GroupRecord:
        return cls(group.group_timestamp_ms, group.camera_ids, n_rectangles)

    def to_dict(self) -> dict:
        return {"timestamp_ms": self.timestamp_ms, "camera_ids": list(self.camera_ids), "rectangles": self.rectangles}

    @classmethod
    def from_dict(cls, d: dict) -> GroupRecord:
        return cls(d["timestamp_ms"], d["camera_ids"], d["rectangles"])


def _encode(record) -> bytes:
    return (json.dumps(record.to_dict(), separators=(",", ":")) + "\n").encode("utf-8")


def _day_of(ts_ms: int) -> int:
    return ts_ms // DAY_MS


def _segment_name(day: int) -> str:
    return (dt.date(1970, 1, 1) + dt.timedelta(days=day)).isoformat() + ".jsonl"


def _day_from_name(name: str) -> int:
    return (dt.date.fromisoformat(name[: -len(".jsonl")]) - dt.date(1970, 1, 1)).days


@dataclass
class _Segment:
    path: Path
    index_ts: list[int] = field(default_factory=list)
    index_off: list[int] = field(default_factory=list)
    n_records: int = 0
    last_ts: int | None = None
    ordered: bool = True
    scanned_to: int = 0

    def _note(self, ts: int, offset: int) -> None:
        if self.last_ts is not None and ts < self.last_ts:
            self.ordered = False
        if self.n_records % INDEX_STRIDE == 0:
            self.index_ts.append(ts)
            self.index_off.append(offset)
        self.n_records += 1
        self.last_ts = ts if self.last_ts is None else max(self.last_ts, ts)

    def refresh(self) -> None:
        """Index complete lines appended since the last look (possibly by another process)."""
        try:
            size = self.path.stat().st_size
        except FileNotFoundError:
            return
        if size <= self.scanned_to:
            return
        with open(self.path, "rb") as fh:
            fh.seek(self.scanned_to)
            offset = self.scanned_to
            for line in fh:
                if not line.endswith(b"\n"):
                    break
                m = _TS_FIELD.search(line)
                if m is None:
                    logger.warning("%s: unreadable record at byte %d", self.path, offset)
                    offset += len(line)
                    continue
                self._note(int(m.group(1)), offset)
                offset += len(line)
        self.scanned_to = offset

    def read(self, t0: int, t1: int):
        self.refresh()
        if self.n_records == 0:
            return []
        start = 0
        if self.ordered:
            k = bisect.bisect_left(self.index_ts, t0) - 1
            start = self.index_off[max(k, 0)]
        out = []
        with open(self.path, "rb") as fh:
            fh.seek(start)
            pos = start
            for line in fh:
                if pos >= self.scanned_to:
                    break
                pos += len(line)
                m = _TS_FIELD.search(line)
                if m is None:
                    continue
                ts = int(m.group(1))
                if ts >= t1 and self.ordered:
                    break
                if t0 <= ts < t1:
                    try:
                        out.append(json.loads(line))
                    except ValueError:
                        continue
        return out


class _Series:
    """One record kind: a directory of daily segments."""

    def __init__(self, root: Path, codec, fsync: bool):
        self.root = root
        self.codec = codec
        self.fsync = fsync
        self.segments: dict[int, _Segment] = {}
        self.repaired: set[int] = set()
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageFailure(f"cannot create {self.root}: {exc}") from exc
        for p in sorted(self.root.glob("*.jsonl")):
            try:
                day = _day_from_name(p.name)
            except ValueError:
                continue
            self.segments[day] = _Segment(p)

    def _segment(self, day: int) -> _Segment:
        seg = self.segments.get(day)
        if seg is None:
            seg = self.segments[day] = _Segment(self.root / _segment_name(day))
        return seg

    def _repair_tail(self, seg: _Segment, day: int) -> None:
        if day in self.repaired or not seg.path.exists():
            self.repaired.add(day)
            return
        with open(seg.path, "rb+") as fh:
            data = fh.read()
            cut = data.rfind(b"\n") + 1
            if cut < len(data):
                logger.warning("%s: dropping torn tail of %d bytes", seg.path, len(data) - cut)
                fh.truncate(cut)
        self.repaired.add(day)

    def append(self, records) -> None:
        records = list(records)
        if not records:
            return
        ts = [r.timestamp_ms for r in records]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("records in a batch must be timestamp-ordered")
        by_day: dict[int, list] = {}
        for r in records:
            by_day.setdefault(_day_of(r.timestamp_ms), []).append(r)
        for day, batch in by_day.items():
            seg = self._segment(day)
            try:
                self._repair_tail(seg, day)
                seg.refresh()
                payload = b"".join(_encode(r) for r in batch)
                with open(seg.path, "ab") as fh:
                    fh.write(payload)
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
            except OSError as exc:
                raise StorageFailure(f"append to {seg.path} failed: {exc}") from exc
            seg.refresh()

    def query(self, t0: int, t1: int):
        if t0 > t1:
            raise InvalidRange(f"empty range: {t0} > {t1}")
        # pick up segments created by other writers
        for p in self.root.glob("*.jsonl"):
            try:
                day = _day_from_name(p.name)
            except ValueError:
                continue
            self.segments.setdefault(day, _Segment(p))
        d0, d1 = _day_of(t0), _day_of(max(t0, t1 - 1))
        out = []
        for day in sorted(self.segments):
            if d0 <= day <= d1:
                rows = self.segments[day].read(t0, t1)
                if not self.segments[day].ordered:
                    rows.sort(key=lambda d: d["timestamp_ms"])
                out.extend(rows)
        return [self.codec.from_dict(d) for d in out]


class RecordStore:
    """Time-indexed store for detections and fitted rectangles.

    Single writer per directory; any number of readers.
    """

    def __init__(self, root, fsync: bool = True):
        self.root = Path(root)
        self.rectangles = _Series(self.root / "rectangles", RectangleRecord, fsync)
        self.detections = _Series(self.root / "detections", DetectionRecord, fsync)
        self.groups = _Series(self.root / "groups", GroupRecord, fsync)

    def append_rectangles(self, records) -> None:
        self.rectangles.append(records)

    def query_rectangles(self, t0_ms: int, t1_ms: int) -> list[RectangleRecord]:
        return self.rectangles.query(int(t0_ms), int(t1_ms))

    def append_detections(self, records) -> None:
        self.detections.append(records)

    def query_detections(self, t0_ms: int, t1_ms: int) -> list[DetectionRecord]:
        return self.detections.query(int(t0_ms), int(t1_ms))

    def append_groups(self, records) -> None:
        self.groups.append(records)

    def query_groups(self, t0_ms: int, t1_ms: int) -> list[GroupRecord]:
        return self.groups.query(int(t0_ms), int(t1_ms))


# ---------------------------------------------------------------------------
# Detection files (the exchange format between cameras and fusion)
# ---------------------------------------------------------------------------


def write_detection_file(directory, record: DetectionRecord) -> Path:
    """Per-frame mode: ``<directory>/<unix_ms>.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{record.timestamp_ms}.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(record.to_dict(), separators=(",", ":")) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_detection_file(path) -> list[DetectionRecord]:
    """Read one per-frame ``.json`` file or a batch ``.jsonl`` file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".jsonl":
        return [DetectionRecord.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
    return [DetectionRecord.from_dict(json.loads(text))]
