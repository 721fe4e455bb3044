"""Planar geometry on the bird's-eye grid.

Conventions used throughout the package:

* Points are ``(x, y)`` in grid pixels, x to the right, y down.
* Pixel ``(row i, col j)`` covers the square ``[j, j+1] x [i, i+1]``; its
  center is ``(j + 0.5, i + 0.5)``.
* Polygons are ``(N, 2)`` float arrays.  "Counter-clockwise" means positive
  shoelace area on the raw coordinates.
* Masks are 2-D boolean arrays indexed ``[row, col]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import ndimage

from petmap.errors import DegenerateConfiguration, PointAtInfinity, TooFewPoints

EPS = 1e-9

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


# ---------------------------------------------------------------------------
# Rotated rectangles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RotatedRect:
    """Rectangle with ``width >= height``.

    ``angle_deg`` is the direction of the width (long) edge against the grid
    x-axis, in ``[0, 180)``; squares are reduced further into ``[0, 90)``.
    """

    cx: float
    cy: float
    width: float
    height: float
    angle_deg: float

    @classmethod
    def normalized(cls, cx, cy, width, height, angle_deg) -> RotatedRect:
        w, h, a = float(width), float(height), float(angle_deg)
        if h > w:
            w, h = h, w
            a += 90.0
        period = 90.0 if abs(w - h) <= EPS * max(1.0, w) else 180.0
        a = math.fmod(a, period)
        if a < 0:
            a += period
        if a >= period - 1e-12:
            a = 0.0
        return cls(float(cx), float(cy), w, h, a)

    @classmethod
    def from_corners(cls, corners) -> RotatedRect:
        c = np.asarray(corners, dtype=float).reshape(4, 2)
        center = c.mean(axis=0)
        e0 = c[1] - c[0]
        e1 = c[2] - c[1]
        angle = math.degrees(math.atan2(e0[1], e0[0]))
        return cls.normalized(center[0], center[1], np.hypot(*e0), np.hypot(*e1), angle)

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def aspect(self) -> float:
        return self.width / self.height if self.height > 0 else math.inf

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit vectors along the width edge and the height edge."""
        t = math.radians(self.angle_deg)
        u = np.array([math.cos(t), math.sin(t)])
        return u, np.array([-u[1], u[0]])

    def corners(self) -> np.ndarray:
        """The four vertices, counter-clockwise, starting at (-w/2, -h/2)."""
        u, v = self.axes()
        c = np.array([self.cx, self.cy])
        hw, hh = self.width / 2.0, self.height / 2.0
        return np.array(
            [c - hw * u - hh * v, c + hw * u - hh * v, c + hw * u + hh * v, c - hw * u + hh * v]
        )

    def inflated(self, margin: float) -> RotatedRect:
        return RotatedRect.normalized(
            self.cx, self.cy, self.width + 2 * margin, self.height + 2 * margin, self.angle_deg
        )


# ---------------------------------------------------------------------------
# Homographies
# ---------------------------------------------------------------------------


def normalize_homography(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DegenerateConfiguration("homography has non-finite entries")
    if abs(m[2, 2]) > EPS:
        m = m / m[2, 2]
    else:
        m = m / np.linalg.norm(m)
    if abs(np.linalg.det(m)) <= EPS:
        raise DegenerateConfiguration("homography is singular")
    return m


def _similarity_normalizer(pts: np.ndarray) -> np.ndarray:
    """Translate to centroid 0 and scale to RMS distance sqrt(2)."""
    c = pts.mean(axis=0)
    rms = math.sqrt(np.mean(np.sum((pts - c) ** 2, axis=1)))
    if rms < EPS:
        raise DegenerateConfiguration("points are coincident")
    s = math.sqrt(2.0) / rms
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _check_point_set(pts: np.ndarray, name: str) -> None:
    n = len(pts)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    d[np.diag_indices(n)] = np.inf
    if d.min() < EPS:
        raise DegenerateConfiguration(f"duplicated {name} points")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= EPS * max(1.0, sv[0]):
        raise DegenerateConfiguration(f"all {name} points are collinear")
    if n == 4:
        for a, b, c in combinations(range(4), 3):
            if abs(_cross(pts[a], pts[b], pts[c])) < EPS:
                raise DegenerateConfiguration(f"three {name} points are collinear")


def estimate_homography(src, dst) -> np.ndarray:
    """Normalized DLT fit of ``dst ~ H @ src`` over all correspondences.

    Both point sets are conditioned to zero centroid and RMS radius sqrt(2),
    the 2n x 9 system is solved by SVD, and the result is denormalized.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("source and target point counts differ")
    if len(src) < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {len(src)}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise DegenerateConfiguration("non-finite correspondence")

    t_src = _similarity_normalizer(src)
    t_dst = _similarity_normalizer(dst)
    ns = src * t_src[0, 0] + t_src[:2, 2]
    nd = dst * t_dst[0, 0] + t_dst[:2, 2]
    _check_point_set(ns, "source")
    _check_point_set(nd, "target")

    n = len(ns)
    x, y = ns[:, 0], ns[:, 1]
    u, v = nd[:, 0], nd[:, 1]
    zero, one = np.zeros(n), np.ones(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.column_stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u])
    a[1::2] = np.column_stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v])
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] <= EPS * sv[0]:
        raise DegenerateConfiguration("correspondences do not determine a unique homography")
    hn = vt[-1].reshape(3, 3)
    return normalize_homography(np.linalg.inv(t_dst) @ hn @ t_src)


def invert_homography(h) -> np.ndarray:
    return normalize_homography(np.linalg.inv(np.asarray(h, dtype=float)))


def project_points(h, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    h = np.asarray(h, dtype=float)
    w = pts @ h[2, :2] + h[2, 2]
    if np.any(np.abs(w) <= EPS):
        raise PointAtInfinity("point maps to infinity under homography")
    xy = pts @ h[:2, :2].T + h[:2, 2]
    return xy / w[:, None]


def project_point(h, p) -> tuple[float, float]:
    x, y = project_points(h, [p])[0]
    return (float(x), float(y))


def project_polygon(h, poly) -> np.ndarray:
    return project_points(h, poly)


def reprojection_errors(h, src, dst) -> np.ndarray:
    return np.linalg.norm(project_points(h, src) - np.asarray(dst, dtype=float), axis=1)


# ---------------------------------------------------------------------------
# Polygons, hulls, rectangles
# ---------------------------------------------------------------------------


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    p = np.asarray(poly, dtype=float)
    q = np.roll(p, -1, axis=0)
    return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))


def polygon_perimeter(poly) -> float:
    p = np.asarray(poly, dtype=float)
    return float(np.sum(np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1)))


def as_polygon(vertices) -> np.ndarray:
    """Validate a vertex list: finite, >= 3 vertices, no repeated neighbours."""
    p = np.asarray(vertices, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError("polygon must be an (N, 2) array")
    if not np.all(np.isfinite(p)):
        raise ValueError("polygon has non-finite vertices")
    if len(p) < 3:
        raise ValueError("polygon needs at least 3 vertices")
    if np.any(np.all(p == np.roll(p, -1, axis=0), axis=1)):
        raise ValueError("polygon has identical consecutive vertices")
    return p


def convex_hull(points) -> np.ndarray:
    """Monotone-chain hull, counter-clockwise, collinear points dropped."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    pts = pts[np.r_[True, np.any(pts[1:] != pts[:-1], axis=1)]]
    if len(pts) < 3:
        raise DegenerateConfiguration("need at least 3 distinct points")
    plist = pts.tolist()

    def chain(seq):
        out = []
        for px, py in seq:
            while len(out) >= 2:
                (ox, oy), (ax, ay) = out[-2], out[-1]
                if (ax - ox) * (py - oy) - (ay - oy) * (px - ox) > 0:
                    break
                out.pop()
            out.append((px, py))
        return out

    lower = chain(plist)
    upper = chain(reversed(plist))
    hull = np.array(lower[:-1] + upper[:-1])
    span = float(np.ptp(pts, axis=0).max())
    if len(hull) < 3 or polygon_area(hull) <= EPS * max(1.0, span) ** 2:
        raise DegenerateConfiguration("points are collinear")
    return hull


def min_area_rect(points) -> RotatedRect:
    """Smallest enclosing rectangle; one of its sides lies on a hull edge.

    Every hull edge direction is tried (vectorized calipers); ties keep the
    first edge in hull order.
    """
    hull = convex_hull(points)
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.linalg.norm(edges, axis=1)
    u = edges / lengths[:, None]
    v = np.column_stack([-u[:, 1], u[:, 0]])
    pu = u @ hull.T
    pv = v @ hull.T
    umin, umax = pu.min(axis=1), pu.max(axis=1)
    vmin, vmax = pv.min(axis=1), pv.max(axis=1)
    areas = (umax - umin) * (vmax - vmin)
    k = int(np.argmin(areas))
    cu, cv = (umin[k] + umax[k]) / 2.0, (vmin[k] + vmax[k]) / 2.0
    center = cu * u[k] + cv * v[k]
    angle = math.degrees(math.atan2(u[k, 1], u[k, 0]))
    return RotatedRect.normalized(
        center[0], center[1], umax[k] - umin[k], vmax[k] - vmin[k], angle
    )


def point_in_polygon(p, poly) -> bool:
    """Even-odd test with the same half-open convention as the rasterizer."""
    x, y = float(p[0]), float(p[1])
    v = np.asarray(poly, dtype=float)
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    crosses = ((y0 <= y) & (y1 > y)) | ((y1 <= y) & (y0 > y))
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    return bool(np.count_nonzero(crosses & (xs <= x)) % 2)


def _segments_cross(a0, a1, b0, b1) -> bool:
    d1 = _cross(b0, b1, a0)
    d2 = _cross(b0, b1, a1)
    d3 = _cross(a0, a1, b0)
    d4 = _cross(a0, a1, b1)
    return (d1 * d2 <= 0) and (d3 * d4 <= 0) and not (d1 == d2 == d3 == d4 == 0)


def polygons_intersect(a, b) -> bool:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if any(point_in_polygon(p, b) for p in a) or any(point_in_polygon(p, a) for p in b):
        return True
    amin, amax = a.min(axis=0), a.max(axis=0)
    bmin, bmax = b.min(axis=0), b.max(axis=0)
    if np.any(amax < bmin) or np.any(bmax < amin):
        return False
    for i in range(len(a)):
        for j in range(len(b)):
            if _segments_cross(a[i], a[(i + 1) % len(a)], b[j], b[(j + 1) % len(b)]):
                return True
    return False


def clip_convex(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by a counter-clockwise convex ``clip``."""
    out = [tuple(p) for p in np.asarray(subject, dtype=float)]
    c = np.asarray(clip, dtype=float)
    for i in range(len(c)):
        a, b = c[i], c[(i + 1) % len(c)]
        inp, out = out, []
        if not inp:
            break
        prev = inp[-1]
        s_prev = _cross(a, b, prev)
        for cur in inp:
            s_cur = _cross(a, b, cur)
            if (s_cur >= 0) != (s_prev >= 0):
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            if s_cur >= 0:
                out.append(cur)
            prev, s_prev = cur, s_cur
    return np.array(out).reshape(-1, 2)


def rect_iou(a: RotatedRect, b: RotatedRect) -> float:
    inter = clip_convex(a.corners(), b.corners())
    ia = abs(polygon_area(inter)) if len(inter) >= 3 else 0.0
    union = a.area + b.area - ia
    return ia / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


def fill_polygon(mask: np.ndarray, poly, origin=(0.0, 0.0), value=True) -> np.ndarray:
    """Set ``mask`` pixels whose centers fall inside ``poly`` (even-odd rule).

    ``origin`` is the grid coordinate of the mask's top-left corner, so a
    mask can be a window onto a larger grid.  Pixels outside the mask are
    silently discarded.  Returns ``mask``.
    """
    height, width = mask.shape
    v = np.asarray(poly, dtype=float) - np.asarray(origin, dtype=float)
    if len(v) < 3:
        return mask
    ymin, ymax = v[:, 1].min(), v[:, 1].max()
    i0 = max(0, math.ceil(ymin - 0.5))
    i1 = min(height, math.ceil(ymax - 0.5))
    if i1 <= i0:
        return mask
    j0 = max(0, math.ceil(v[:, 0].min() - 0.5))
    j1 = min(width, math.ceil(v[:, 0].max() - 0.5))
    if j1 <= j0:
        return mask
    yc = (np.arange(i0, i1) + 0.5)[:, None]
    x0, y0 = v[:, 0] - j0, v[:, 1]
    nxt = np.r_[1 : len(v), 0]
    x1, y1 = x0[nxt], y0[nxt]
    crosses = (y0 <= yc) != (y1 <= yc)
    dy = np.where(y1 != y0, y1 - y0, 1.0)
    xs = x0 + (yc - y0) * ((x1 - x0) / dy)
    xs = np.where(crosses, xs, np.inf)
    if xs.shape[1] % 2:
        xs = np.hstack([xs, np.full((xs.shape[0], 1), np.inf)])
    xs.sort(axis=1)
    xs = xs[:, : int(crosses.sum(axis=1).max())]
    span = j1 - j0
    left = np.clip(np.ceil(xs[:, 0::2] - 0.5), 0, span)
    right = np.clip(np.ceil(xs[:, 1::2] - 0.5), 0, span)
    cols = np.arange(span) + 0.0
    # pairs of sorted crossings are disjoint spans; a column is covered by
    # at most one of them
    covered = np.zeros((i1 - i0, span), dtype=bool)
    for k in range(left.shape[1]):
        lk, rk = left[:, k : k + 1], right[:, k : k + 1]
        covered |= (cols >= lk) & (cols < rk)
    mask[i0:i1, j0:j1][covered] = value
    return mask


def rasterize_polygon(poly, width: int, height: int) -> np.ndarray:
    if width <= 0 or height <= 0:
        raise ValueError("grid dimensions must be positive")
    return fill_polygon(np.zeros((height, width), dtype=bool), poly)


# ---------------------------------------------------------------------------
# Connected components and contours
# ---------------------------------------------------------------------------


def label_components(mask: np.ndarray):
    """8-connected labelling.  Returns ``(labels, slices)``."""
    labels, _ = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    return labels, ndimage.find_objects(labels)


def _trace_outer(sub: np.ndarray) -> list[tuple[int, int]]:
    """Crack-follow the outer boundary of the single component in ``sub``.

    The walk keeps the component on its right and turns left whenever the
    pixel ahead-left is set, which joins diagonal neighbours (8-connectivity)
    and never enters holes.  Vertices are pixel corners in ``sub`` coordinates.
    """
    h, w = sub.shape
    rows = sub.tolist()

    def is_set(px, py):
        c, r = math.floor(px), math.floor(py)
        return 0 <= r < h and 0 <= c < w and rows[r][c]

    r0 = int(np.argmax(sub.any(axis=1)))
    c0 = int(np.argmax(sub[r0]))
    start = (c0, r0)
    x, y = c0 + 1, r0
    dx, dy = 1, 0
    verts = [start]
    while (x, y) != start:
        lx, ly = dy, -dx
        ahead_x, ahead_y = x + 0.5 * dx, y + 0.5 * dy
        if is_set(ahead_x + 0.5 * lx, ahead_y + 0.5 * ly):
            ndx, ndy = lx, ly
        elif is_set(ahead_x - 0.5 * lx, ahead_y - 0.5 * ly):
            ndx, ndy = dx, dy
        else:
            ndx, ndy = -lx, -ly
        if (ndx, ndy) != (dx, dy):
            verts.append((x, y))
            dx, dy = ndx, ndy
        x, y = x + dx, y + dy
    return verts


def extract_contours(mask: np.ndarray) -> list[np.ndarray]:
    """One outer contour per 8-connected component, holes ignored.

    Contours run along pixel edges, so filling one with the pixel-center
    rule reproduces its component (with holes filled) exactly.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return []
    labels, slices = label_components(mask)
    contours = []
    for k, sl in enumerate(slices, start=1):
        if sl is None:
            continue
        sub = labels[sl] == k
        verts = np.array(_trace_outer(sub), dtype=float)
        verts[:, 0] += sl[1].start
        verts[:, 1] += sl[0].start
        contours.append(verts)
    return contours


def row_extreme_centers(sub: np.ndarray, offset=(0, 0)) -> np.ndarray:
    """Centers of the first and last set pixel of every non-empty row.

    These include every convex-hull vertex of the pixel-center set, at a
    fraction of the point count.
    """
    any_row = sub.any(axis=1)
    r = np.nonzero(any_row)[0]
    first = np.argmax(sub[r], axis=1)
    last = sub.shape[1] - 1 - np.argmax(sub[r, ::-1], axis=1)
    two = last != first
    ys = np.concatenate([r, r[two]]) + offset[0] + 0.5
    xs = np.concatenate([first, last[two]]) + offset[1] + 0.5
    return np.column_stack([xs, ys])
