"""Multi-camera fusion of projected detections into vehicle rectangles.

Each camera's polygons are rasterized onto the shared grid and summed into
a per-pixel camera count.  Counts are scored (1, 2, 6, 8 for one to four
cameras), regions seen by enough cameras are fitted with minimum-area
rotated rectangles, and the rectangles pass through three safeguards:
axis snapping, edge extension and valley splitting.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from petmap import geometry
from petmap.errors import DegenerateConfiguration, InvalidConfig
from petmap.geometry import RotatedRect

GRID_SIZE = 1600
DEFAULT_POINT_VALUES = {1: 1.0, 2: 2.0, 3: 6.0, 4: 8.0}
MAX_CAMERAS = 4
MAX_SPLIT_DEPTH = 2


@dataclass
class FusionConfig:
    point_values: dict = field(default_factory=lambda: dict(DEFAULT_POINT_VALUES))
    high_overlap_min: int = 3
    snap_angle_tol_deg: float = 5.0
    snap_aspect_min: float = 1.5
    edge_margin_px: float = 10.0
    edge_extend_px: float = 60.0
    # 1.5x a 4.6 m x 1.8 m sedan at 26.2 m / 800 px (about 7700 px^2)
    split_area_px: float = 11500.0
    split_valley_ratio: float = 0.5
    min_rect_area_px: float = 1500.0
    min_mean_score: float = 4.0

    def __post_init__(self):
        self.point_values = {int(k): float(v) for k, v in self.point_values.items()}
        if self.high_overlap_min not in (2, 3, 4):
            raise InvalidConfig("high_overlap_min must be 2, 3 or 4")
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name != "point_values" and not val > 0:
                raise InvalidConfig(f"{f.name} must be positive, got {val}")
        if any(k not in range(1, MAX_CAMERAS + 1) or v < 0 for k, v in self.point_values.items()):
            raise InvalidConfig("point_values maps camera counts 1-4 to non-negative scores")

    @classmethod
    def from_dict(cls, d: dict) -> FusionConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown fusion keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["point_values"] = {str(k): v for k, v in self.point_values.items()}
        return d

    def score_table(self) -> np.ndarray:
        lut = np.zeros(MAX_CAMERAS + 1, dtype=np.float32)
        for k, v in self.point_values.items():
            lut[k] = v
        return lut


@dataclass
class OverlapGrid:
    """Camera counts per pixel; scores are looked up from counts on demand."""

    counts: np.ndarray
    score_table: np.ndarray
    timestamp_ms: int | None = None
    camera_support: int | None = None

    @property
    def scores(self) -> np.ndarray:
        return self.score_table[self.counts]

    def scores_in(self, sl) -> np.ndarray:
        return self.score_table[self.counts[sl]]

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def height(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class FittedRectangle:
    rect: RotatedRect
    timestamp_ms: int | None
    camera_support: int | None
    mean_score: float

    @property
    def corners(self) -> np.ndarray:
        return self.rect.corners()


def point_value(count: int, cfg: FusionConfig | None = None) -> float:
    cfg = cfg or FusionConfig()
    return float(cfg.score_table()[count])


def build_overlap_grid(group, width=GRID_SIZE, height=GRID_SIZE, cfg: FusionConfig | None = None):
    """Per-pixel number of cameras covering each pixel, plus its score.

    A camera adds at most one per pixel however many of its own polygons
    overlap there.
    """
    if width <= 0 or height <= 0:
        raise ValueError("grid dimensions must be positive")
    cfg = cfg or FusionConfig()
    counts = np.zeros((height, width), dtype=np.uint8)
    for frame in group.frames:
        polys = [p for p in frame.polygons if len(p) >= 3]
        if not polys:
            continue
        allv = np.vstack(polys)
        x0 = max(0, math.floor(allv[:, 0].min()))
        y0 = max(0, math.floor(allv[:, 1].min()))
        x1 = min(width, math.ceil(allv[:, 0].max()) + 1)
        y1 = min(height, math.ceil(allv[:, 1].max()) + 1)
        if x1 <= x0 or y1 <= y0:
            continue
        cam = np.zeros((y1 - y0, x1 - x0), dtype=bool)
        for p in polys:
            geometry.fill_polygon(cam, p, origin=(x0, y0))
        counts[y0:y1, x0:x1] += cam
    ts = getattr(group, "group_timestamp_ms", None)
    return OverlapGrid(counts, cfg.score_table(), ts, len(group.frames))


def high_overlap_mask(grid: OverlapGrid, min_count: int = 3) -> np.ndarray:
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    return grid.counts >= min_count


# ---------------------------------------------------------------------------
# Rectangle helpers
# ---------------------------------------------------------------------------


def _rect_window(rect: RotatedRect, grid: OverlapGrid):
    """Boolean footprint of ``rect`` clipped to the grid, with its slices."""
    c = rect.corners()
    x0 = max(0, math.floor(c[:, 0].min()))
    y0 = max(0, math.floor(c[:, 1].min()))
    x1 = min(grid.width, math.ceil(c[:, 0].max()) + 1)
    y1 = min(grid.height, math.ceil(c[:, 1].max()) + 1)
    if x1 <= x0 or y1 <= y0:
        return None, None
    win = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    geometry.fill_polygon(win, c, origin=(x0, y0))
    return win, (slice(y0, y1), slice(x0, x1))


def mean_score_in(rect: RotatedRect, grid: OverlapGrid) -> float:
    win, sl = _rect_window(rect, grid)
    if win is None or not win.any():
        return 0.0
    return float(grid.scores_in(sl)[win].mean())


def mean_count_in(rect: RotatedRect, grid: OverlapGrid) -> float:
    win, sl = _rect_window(rect, grid)
    if win is None or not win.any():
        return 0.0
    return float(grid.counts[sl][win].mean())


def _fit_pixels(sub: np.ndarray, offset) -> RotatedRect | None:
    """Min-area rectangle of a pixel set, grown half a pixel to cover whole pixels."""
    pts = geometry.row_extreme_centers(sub, offset)
    try:
        return geometry.min_area_rect(pts).inflated(0.5)
    except DegenerateConfiguration:
        return None


# ---------------------------------------------------------------------------
# Safeguards
# ---------------------------------------------------------------------------


def _snap(rect: RotatedRect, cfg: FusionConfig) -> RotatedRect:
    if rect.aspect < cfg.snap_aspect_min or rect.area < cfg.min_rect_area_px:
        return rect
    for target in (0.0, 90.0, 180.0):
        if 0 < abs(rect.angle_deg - target) <= cfg.snap_angle_tol_deg:
            return RotatedRect.normalized(rect.cx, rect.cy, rect.width, rect.height, target)
    return rect


def _border_distance(pts: np.ndarray, width: int, height: int) -> np.ndarray:
    return np.minimum.reduce([pts[:, 0], pts[:, 1], width - pts[:, 0], height - pts[:, 1]])


def _extend(rect: RotatedRect, grid: OverlapGrid, cfg: FusionConfig) -> RotatedRect:
    corners = rect.corners()
    d = _border_distance(corners, grid.width, grid.height)
    # only rectangles still inside the grid; an extended one already
    # crosses the border, which keeps the step idempotent
    if d.min() < -0.5:
        return rect
    tail_near = d[[0, 3]].min() <= cfg.edge_margin_px
    head_near = d[[1, 2]].min() <= cfg.edge_margin_px
    if tail_near == head_near:
        return rect
    u, _ = rect.axes()
    sign = 1.0 if head_near else -1.0
    shift = sign * cfg.edge_extend_px / 2.0 * u
    return RotatedRect.normalized(
        rect.cx + shift[0],
        rect.cy + shift[1],
        rect.width + cfg.edge_extend_px,
        rect.height,
        rect.angle_deg,
    )


def _valley(rect: RotatedRect, grid: OverlapGrid, cfg: FusionConfig):
    """Deepest low-score cross-section, as ``(ratio, axis, offset)`` or None.

    Profiles are per-pixel-column means along each principal axis; only the
    middle 60% of the rectangle is searched so splits leave two car-sized
    halves rather than slivers.
    """
    win, sl = _rect_window(rect, grid)
    if win is None or not win.any():
        return None
    ii, jj = np.nonzero(win)
    pts = np.column_stack([jj + sl[1].start + 0.5, ii + sl[0].start + 0.5])
    vals = grid.scores_in(sl)[win].astype(float)
    overall = vals.mean()
    if overall <= 0:
        return None
    best = None
    for axis, (vec, length) in enumerate(zip(rect.axes(), (rect.width, rect.height))):
        s = (pts - [rect.cx, rect.cy]) @ vec + length / 2.0
        bins = np.clip(np.floor(s).astype(int), 0, max(0, math.ceil(length) - 1))
        n = np.bincount(bins)
        tot = np.bincount(bins, weights=vals)
        lo, hi = math.ceil(0.2 * length), math.floor(0.8 * length)
        idx = np.arange(len(n))
        ok = (n > 0) & (idx >= lo) & (idx < hi)
        if not ok.any():
            continue
        prof = np.where(ok, tot / np.maximum(n, 1), np.inf)
        k = int(np.argmin(prof))
        ratio = prof[k] / overall
        if best is None or ratio < best[0]:
            best = (ratio, axis, k + 0.5 - length / 2.0)
    if best is None or best[0] >= cfg.split_valley_ratio:
        return None
    return best


def _split(rect: RotatedRect, grid: OverlapGrid, cfg: FusionConfig, depth: int = 0):
    if depth >= MAX_SPLIT_DEPTH or rect.area <= cfg.split_area_px:
        return [rect]
    valley = _valley(rect, grid, cfg)
    if valley is None:
        return [rect]
    _, axis, cut = valley
    u, v = rect.axes()
    vec, length = (u, rect.width) if axis == 0 else (v, rect.height)
    win, sl = _rect_window(rect, grid)
    strong = win & (grid.counts[sl] >= cfg.high_overlap_min)
    ii, jj = np.nonzero(strong)
    pts = np.column_stack([jj + sl[1].start + 0.5, ii + sl[0].start + 0.5])
    s = (pts - [rect.cx, rect.cy]) @ vec

    children = []
    for side in (s < cut - 0.5, s > cut + 0.5):
        child = None
        if side.sum() >= 3:
            sub = np.zeros(strong.shape, dtype=bool)
            sub[ii[side], jj[side]] = True
            child = _fit_pixels(sub, (sl[0].start, sl[1].start))
        if child is None or child.area < cfg.min_rect_area_px:
            continue
        children.extend(_split(child, grid, cfg, depth + 1))
    return children or [rect]


def apply_safeguards(rect: RotatedRect, grid: OverlapGrid, cfg: FusionConfig | None = None):
    """Snap, extend, then split one rectangle.  Returns one or more rectangles."""
    cfg = cfg or FusionConfig()
    rect = _snap(rect, cfg)
    rect = _extend(rect, grid, cfg)
    return _split(rect, grid, cfg)


def _sort_key(fr: FittedRectangle):
    return (-fr.rect.area, fr.rect.cx, fr.rect.cy)


def fit_rectangles(grid: OverlapGrid, cfg: FusionConfig | None = None) -> list[FittedRectangle]:
    """Rectangles for every high-overlap region that meets the coverage criteria.

    Each 8-connected high-overlap region (the area inside one outer contour)
    gets its minimum-area rectangle; it is kept when large enough and when
    the mean score under it reaches ``min_mean_score``.
    """
    cfg = cfg or FusionConfig()
    mask = high_overlap_mask(grid, cfg.high_overlap_min)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return []
    cols = np.flatnonzero(mask.any(axis=0))
    r0, c0 = rows[0], cols[0]
    window = mask[r0 : rows[-1] + 1, c0 : cols[-1] + 1]
    labels, slices = geometry.label_components(window)

    out = []
    for k, sl in enumerate(slices, start=1):
        if sl is None:
            continue
        sub = labels[sl] == k
        rect = _fit_pixels(sub, (sl[0].start + r0, sl[1].start + c0))
        if rect is None or rect.area < cfg.min_rect_area_px:
            continue
        first_score = mean_score_in(rect, grid)
        if first_score < cfg.min_mean_score:
            continue
        for piece in apply_safeguards(rect, grid, cfg):
            score = first_score if piece == rect else mean_score_in(piece, grid)
            if piece.area >= cfg.min_rect_area_px and score >= cfg.min_mean_score:
                out.append(FittedRectangle(piece, grid.timestamp_ms, grid.camera_support, score))
    out.sort(key=_sort_key)
    return out


def fuse_group(group, cfg: FusionConfig | None = None, width=GRID_SIZE, height=GRID_SIZE):
    cfg = cfg or FusionConfig()
    return fit_rectangles(build_overlap_grid(group, width, height, cfg), cfg)
