"""Per-pixel Post-Encroachment Time over a region of interest.

Every ROI pixel carries a stopwatch of vacant time.  Vacant pixels add the
elapsed time since the previous update; when a vehicle covers a pixel its
stopwatch is reset, and if the pixel had been occupied before and stayed
vacant for at least ``MIN_INTERVAL_S`` the vacancy is logged as one PET
interval.  The mean PET of a pixel is the plain average of its intervals.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from petmap import geometry
from petmap.errors import NonMonotonicTimestamp, RoiOutOfBounds

MIN_INTERVAL_S = 0.2
GRID_SIZE = 1600
ROI_SIZE = 800
ROI_ORIGIN = ((GRID_SIZE - ROI_SIZE) // 2, (GRID_SIZE - ROI_SIZE) // 2)
# 800 px of ROI span about 26.2 m of road
METERS_PER_PX = 26.2 / ROI_SIZE


@dataclass(frozen=True)
class PetEvent:
    row: int
    col: int
    interval_s: float
    end_timestamp_ms: int

    @property
    def pixel(self) -> tuple[int, int]:
        return (self.row, self.col)


def _corners_of(item) -> np.ndarray:
    if isinstance(item, geometry.RotatedRect):
        return item.corners()
    corners = getattr(item, "corners", item)
    if callable(corners):
        corners = corners()
    return np.asarray(corners, dtype=float)


class PetGrid:
    """Stopwatch, accumulated-interval and interval-count matrices for one ROI.

    Single writer: updates must arrive with strictly increasing timestamps.
    """

    def __init__(
        self,
        roi_origin=ROI_ORIGIN,
        roi_width: int = ROI_SIZE,
        roi_height: int = ROI_SIZE,
        grid_width: int = GRID_SIZE,
        grid_height: int = GRID_SIZE,
        min_interval_s: float = MIN_INTERVAL_S,
    ):
        ox, oy = roi_origin
        if roi_width <= 0 or roi_height <= 0:
            raise RoiOutOfBounds("ROI dimensions must be positive")
        if ox < 0 or oy < 0 or ox + roi_width > grid_width or oy + roi_height > grid_height:
            raise RoiOutOfBounds(
                f"ROI {roi_width}x{roi_height} at {roi_origin} exceeds {grid_width}x{grid_height} grid"
            )
        self.roi_origin = (int(ox), int(oy))
        self.roi_width = int(roi_width)
        self.roi_height = int(roi_height)
        self.min_interval_s = float(min_interval_s)
        shape = (self.roi_height, self.roi_width)
        self.stopwatch_s = np.zeros(shape)
        self.sum_s = np.zeros(shape)
        self.count = np.zeros(shape, dtype=np.int64)
        self.ever_occupied = np.zeros(shape, dtype=bool)
        self.last_update_ms: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.stopwatch_s.shape

    def occupancy(self, rectangles) -> np.ndarray:
        occ = np.zeros(self.shape, dtype=bool)
        for r in rectangles:
            geometry.fill_polygon(occ, _corners_of(r), origin=self.roi_origin)
        return occ

    def update(self, rectangles, timestamp_ms: int, collect_events: bool = True):
        """Advance to ``timestamp_ms`` with the given vehicle footprints.

        Returns the intervals closed by this update as ``PetEvent``s (or just
        their count when ``collect_events`` is false).
        """
        timestamp_ms = int(timestamp_ms)
        if self.last_update_ms is not None and timestamp_ms <= self.last_update_ms:
            raise NonMonotonicTimestamp(
                f"update at {timestamp_ms} ms does not follow {self.last_update_ms} ms"
            )
        dt = 0.0 if self.last_update_ms is None else (timestamp_ms - self.last_update_ms) / 1000.0
        occ = self.occupancy(rectangles)
        vacant = ~occ
        self.stopwatch_s[vacant] += dt

        closing = occ & self.ever_occupied & (self.stopwatch_s >= self.min_interval_s)
        rows, cols = np.nonzero(closing)
        intervals = self.stopwatch_s[rows, cols]
        self.sum_s[rows, cols] += intervals
        self.count[rows, cols] += 1

        self.stopwatch_s[occ] = 0.0
        self.ever_occupied |= occ
        self.last_update_ms = timestamp_ms

        if not collect_events:
            return len(rows)
        return [
            PetEvent(r, c, t, timestamp_ms)
            for r, c, t in zip(rows.tolist(), cols.tolist(), intervals.tolist())
        ]

    def mean_pet(self) -> np.ndarray:
        """Mean interval per pixel in seconds; NaN where nothing was logged."""
        out = np.full(self.shape, np.nan)
        has = self.count > 0
        out[has] = self.sum_s[has] / self.count[has]
        return out

    def update_counts(self) -> np.ndarray:
        return self.count.copy()


def new_pet_grid(roi_origin=ROI_ORIGIN, roi_width=ROI_SIZE, roi_height=ROI_SIZE, **kw) -> PetGrid:
    return PetGrid(roi_origin, roi_width, roi_height, **kw)


def update(grid: PetGrid, rectangles, timestamp_ms: int):
    return grid.update(rectangles, timestamp_ms)


def mean_pet(grid: PetGrid) -> np.ndarray:
    return grid.mean_pet()


def update_counts(grid: PetGrid) -> np.ndarray:
    return grid.update_counts()


def roi_extent_m(roi_width: int = ROI_SIZE, meters_per_px: float = METERS_PER_PX) -> float:
    return roi_width * meters_per_px


def describe_scale(roi_width: int = ROI_SIZE, meters_per_px: float = METERS_PER_PX) -> str:
    extent = roi_extent_m(roi_width, meters_per_px)
    return (
        f"ROI {roi_width} px = {extent:.1f} m, "
        f"{meters_per_px * 100:.3f} cm/px"
    )


# ---------------------------------------------------------------------------
# Snapshot export
# ---------------------------------------------------------------------------


def write_matrix(path, matrix: np.ndarray, kind: str, roi_origin=ROI_ORIGIN) -> None:
    """Text dump: one header line, then one row per line; NaN marks absent values."""
    m = np.asarray(matrix)
    rows, cols = m.shape
    header = f"petmap-matrix kind={kind} rows={rows} cols={cols} origin={roi_origin[0]},{roi_origin[1]}"
    fmt = "%d" if np.issubdtype(m.dtype, np.integer) else "%.9g"
    np.savetxt(path, m, fmt=fmt, header=header, comments="# ")


def read_matrix(path):
    """Inverse of ``write_matrix``; returns ``(matrix, header_fields)``."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith("# petmap-matrix"):
        raise ValueError(f"{path}: not a petmap matrix export")
    meta = dict(tok.split("=", 1) for tok in first[2:].split()[1:])
    rows, cols = int(meta["rows"]), int(meta["cols"])
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.size == 0:
        data = np.zeros((rows, cols))
    data = data.reshape(rows, cols)
    if meta.get("kind") == "count":
        data = data.astype(np.int64)
    ox, oy = (int(v) for v in meta["origin"].split(","))
    meta["origin"] = (ox, oy)
    return data, meta


def export_snapshot(grid: PetGrid, out_dir, prefix: str = "pet"):
    """Write ``<prefix>_mean.txt`` and ``<prefix>_count.txt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mean_path = out / f"{prefix}_mean.txt"
    count_path = out / f"{prefix}_count.txt"
    write_matrix(mean_path, grid.mean_pet(), "mean", grid.roi_origin)
    write_matrix(count_path, grid.update_counts(), "count", grid.roi_origin)
    return mean_path, count_path
