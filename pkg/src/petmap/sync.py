"""Grouping of per-camera detection frames into near-simultaneous sets.

Matching is earliest-first: the oldest unconsumed frame becomes the anchor
and every other camera contributes its closest frame inside the window.
Four cameras make a full group, three a fallback group; with fewer the
anchor alone is discarded.
"""

from __future__ import annotations

import bisect
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from petmap.errors import StaleFrame

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_MS = 350
DEFAULT_MAX_QUEUE = 256
NUM_CAMERAS = 4


@dataclass(frozen=True)
class DetectionFrame:
    camera_id: int
    timestamp_ms: int
    polygons: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.camera_id) < NUM_CAMERAS:
            raise ValueError(f"camera_id out of range: {self.camera_id}")
        if int(self.timestamp_ms) <= 0:
            raise ValueError("timestamp_ms must be positive")
        polys = tuple(np.asarray(p, dtype=float).reshape(-1, 2) for p in self.polygons)
        for p in polys:
            if not np.all(np.isfinite(p)):
                raise ValueError("polygon vertices must be finite")
        object.__setattr__(self, "camera_id", int(self.camera_id))
        object.__setattr__(self, "timestamp_ms", int(self.timestamp_ms))
        object.__setattr__(self, "polygons", polys)


@dataclass(frozen=True)
class FrameGroup:
    frames: tuple[DetectionFrame, ...]
    group_timestamp_ms: int

    @property
    def camera_ids(self) -> tuple[int, ...]:
        return tuple(f.camera_id for f in self.frames)

    @property
    def size(self) -> int:
        return len(self.frames)

    @property
    def disparity_ms(self) -> int:
        ts = [f.timestamp_ms for f in self.frames]
        return max(ts) - min(ts)


def group_timestamp(frames) -> int:
    """Mean timestamp rounded half away from zero, in exact integer arithmetic."""
    ts = [int(f.timestamp_ms) if hasattr(f, "timestamp_ms") else int(f) for f in frames]
    if not ts:
        raise ValueError("no frames")
    total, n = sum(ts), len(ts)
    q, r = divmod(abs(total), n)
    if 2 * r >= n:
        q += 1
    return q if total >= 0 else -q


@dataclass
class SyncBuffer:
    """Per-camera frame queues plus consumption bookkeeping.

    Not thread-safe; callers serialize ``ingest`` and ``next_group``.
    """

    window_ms: int = DEFAULT_WINDOW_MS
    max_queue: int = DEFAULT_MAX_QUEUE
    queues: dict[int, list[DetectionFrame]] = field(default_factory=dict)
    last_consumed: dict[int, int] = field(default_factory=dict)
    stats: Counter = field(default_factory=Counter)
    last_group_ms: int | None = None

    def __len__(self):
        return sum(len(q) for q in self.queues.values())

    def ingest(self, frame: DetectionFrame) -> None:
        cam = frame.camera_id
        last = self.last_consumed.get(cam)
        if last is not None and frame.timestamp_ms < last:
            raise StaleFrame(
                f"camera {cam}: frame at {frame.timestamp_ms} is older than consumed {last}"
            )
        q = self.queues.setdefault(cam, [])
        keys = [f.timestamp_ms for f in q]
        q.insert(bisect.bisect_right(keys, frame.timestamp_ms), frame)
        if len(q) > self.max_queue:
            dropped = q.pop(0)
            self._consume(dropped)
            self.stats["overflow"] += 1
            logger.warning("camera %d queue full, dropped frame %d", cam, dropped.timestamp_ms)

    def _consume(self, frame: DetectionFrame) -> None:
        prev = self.last_consumed.get(frame.camera_id, frame.timestamp_ms)
        self.last_consumed[frame.camera_id] = max(prev, frame.timestamp_ms)

    def oldest(self) -> DetectionFrame | None:
        heads = [q[0] for q in self.queues.values() if q]
        if not heads:
            return None
        return min(heads, key=lambda f: (f.timestamp_ms, f.camera_id))

    def next_group(self, horizon_ms: int | None = None) -> FrameGroup | None:
        """Try to form one group around the oldest frame.

        ``horizon_ms`` is for live use: when given, an anchor is only
        considered once ``horizon_ms`` is past its window, so frames still in
        flight are not mistaken for missing cameras.
        """
        anchor = self.oldest()
        if anchor is None:
            return None
        if horizon_ms is not None and horizon_ms <= anchor.timestamp_ms + self.window_ms:
            return None

        members = [anchor]
        for cam, q in sorted(self.queues.items()):
            if cam == anchor.camera_id or not q:
                continue
            # anchor is the global minimum, so each queue head is this
            # camera's closest frame; earlier of equals wins via sort order
            cand = q[0]
            if cand.timestamp_ms - anchor.timestamp_ms <= self.window_ms:
                members.append(cand)

        ts = group_timestamp(members)
        if len(members) < 3 or (self.last_group_ms is not None and ts <= self.last_group_ms):
            # the second case keeps group timestamps strictly increasing, as
            # the PET stopwatch requires, when a 3-camera group follows a
            # 4-camera group with a late member
            self.queues[anchor.camera_id].pop(0)
            self._consume(anchor)
            self.stats["skipped" if len(members) < 3 else "reordered"] += 1
            return None

        for f in members:
            self.queues[f.camera_id].pop(0)
            self._consume(f)
        members.sort(key=lambda f: f.camera_id)
        self.stats[f"groups_{len(members)}"] += 1
        self.last_group_ms = ts
        return FrameGroup(tuple(members), ts)

    def drain(self, horizon_ms: int | None = None):
        """Yield every group that can be formed now."""
        while True:
            anchor = self.oldest()
            if anchor is None:
                return
            if horizon_ms is not None and horizon_ms <= anchor.timestamp_ms + self.window_ms:
                return
            group = self.next_group(horizon_ms)
            if group is not None:
                yield group


def ingest_frame(buffer: SyncBuffer, frame: DetectionFrame) -> None:
    buffer.ingest(frame)


def next_group(buffer: SyncBuffer) -> FrameGroup | None:
    return buffer.next_group()
