import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


def random_homography(rng, spread=0.3):
    """Well-conditioned perspective map on a ~1000 px plane."""
    while True:
        a = rng.uniform(0.5, 2.0) * np.eye(2) + rng.normal(0, spread, (2, 2))
        h = np.eye(3)
        h[:2, :2] = a
        h[:2, 2] = rng.uniform(-200, 200, 2)
        h[2, :2] = rng.normal(0, 2e-4, 2)
        if abs(np.linalg.det(h)) > 0.1:
            return h / h[2, 2]


def apply_h(h, pts):
    """Reference projection, written out by hand."""
    out = []
    for x, y in pts:
        xp = h[0][0] * x + h[0][1] * y + h[0][2]
        yp = h[1][0] * x + h[1][1] * y + h[1][2]
        w = h[2][0] * x + h[2][1] * y + h[2][2]
        out.append((xp / w, yp / w))
    return np.array(out)


def sweep_min_rect_area(points, step_deg=0.1, lo_deg=0.0, hi_deg=90.0):
    """Smallest axis-aligned box area over rotations lo, lo + step, ..., < hi deg."""
    pts = np.asarray(points, dtype=float)
    t = np.radians(np.arange(lo_deg, hi_deg, step_deg))
    x = np.outer(pts[:, 0], np.cos(t)) + np.outer(pts[:, 1], np.sin(t))
    y = np.outer(pts[:, 1], np.cos(t)) - np.outer(pts[:, 0], np.sin(t))
    return float(np.min(np.ptp(x, axis=0) * np.ptp(y, axis=0)))


def pixel_centers_in(poly, width, height):
    """Brute force even-odd test of every pixel center (independent of the rasterizer)."""
    poly = np.asarray(poly, dtype=float)
    mask = np.zeros((height, width), dtype=bool)
    n = len(poly)
    for i in range(height):
        yc = i + 0.5
        for j in range(width):
            xc = j + 0.5
            inside = False
            for k in range(n):
                x0, y0 = poly[k]
                x1, y1 = poly[(k + 1) % n]
                if (y0 <= yc) != (y1 <= yc):
                    xi = x0 + (yc - y0) * (x1 - x0) / (y1 - y0)
                    if xc < xi:
                        inside = not inside
            mask[i, j] = inside
    return mask
