"""Heatmap rendering of PET and update-count matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from petmap.errors import DimensionMismatch, InvalidDomain

RED = (255, 0, 0)
WHITE = (255, 255, 255)
BLACK = (0, 0, 0)


@dataclass(frozen=True)
class ColorMapSpec:
    kind: str = "linear"
    low_color: tuple = RED
    high_color: tuple = WHITE
    domain: tuple = (0.0, 1.0)
    absent_color: tuple = BLACK

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        if self.kind not in ("linear", "logarithmic"):
            raise InvalidDomain(f"unknown colormap kind {self.kind!r}")
        if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
            raise InvalidDomain(f"domain must satisfy min < max, got {self.domain}")
        if self.kind == "logarithmic" and lo <= 0:
            raise InvalidDomain("logarithmic colormap needs a positive domain minimum")
        object.__setattr__(self, "domain", (lo, hi))

    def parameter(self, values) -> np.ndarray:
        """Interpolation parameter in [0, 1] for each value (NaN stays NaN)."""
        lo, hi = self.domain
        v = np.clip(np.asarray(values, dtype=float), lo, hi)
        if self.kind == "logarithmic":
            return (np.log(v) - np.log(lo)) / (np.log(hi) - np.log(lo))
        return (v - lo) / (hi - lo)


@dataclass
class RasterImage:
    pixels: np.ndarray
    absent: np.ndarray | None = None

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def render_heatmap(values, spec: ColorMapSpec) -> RasterImage:
    v = np.asarray(values, dtype=float)
    if v.ndim != 2 or v.size == 0:
        raise ValueError("values must be a non-empty 2-D matrix")
    absent = np.isnan(v)
    t = spec.parameter(np.where(absent, spec.domain[0], v))[..., None]
    lo = np.asarray(spec.low_color, dtype=float)
    hi = np.asarray(spec.high_color, dtype=float)
    rgb = np.floor(lo + t * (hi - lo) + 0.5)
    rgb[absent] = spec.absent_color
    return RasterImage(rgb.astype(np.uint8), absent)


def composite_over_background(heatmap: RasterImage, background: RasterImage, alpha: float):
    """Alpha-blend ``heatmap`` over ``background``; absent heatmap pixels stay transparent."""
    if heatmap.pixels.shape != background.pixels.shape:
        raise DimensionMismatch(
            f"heatmap {heatmap.pixels.shape} vs background {background.pixels.shape}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    h = heatmap.pixels.astype(float)
    b = background.pixels.astype(float)
    out = np.floor(alpha * h + (1.0 - alpha) * b + 0.5).astype(np.uint8)
    if heatmap.absent is not None:
        out[heatmap.absent] = background.pixels[heatmap.absent]
    return RasterImage(out)


def pet_colormap(mean_pet, min_s: float = 0.2, percentile: float = 99.0, log: bool = True):
    """Red (short, hazardous) to white (long) over [min_s, observed percentile]."""
    present = np.asarray(mean_pet, dtype=float)
    present = present[~np.isnan(present)]
    hi = float(np.percentile(present, percentile)) if present.size else min_s * 10
    if hi <= min_s:
        hi = min_s * 10
    return ColorMapSpec("logarithmic" if log else "linear", RED, WHITE, (min_s, hi))


def count_colormap(counts, more_is_red: bool = True):
    c = np.asarray(counts, dtype=float)
    hi = max(1.0, float(c.max())) if c.size else 1.0
    low, high = (WHITE, RED) if more_is_red else (RED, WHITE)
    return ColorMapSpec("linear", low, high, (0.0, hi))


def write_png(path, image: RasterImage) -> None:
    Image.fromarray(image.pixels).save(path, format="PNG", optimize=False)


def read_png(path) -> RasterImage:
    with Image.open(path) as im:
        return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())


def write_text_image(path, image: RasterImage) -> None:
    """Plain-text PPM (P3); handy for diffing small renders in tests."""
    h, w, _ = image.pixels.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        for row in image.pixels:
            fh.write(" ".join(str(int(c)) for c in row.reshape(-1)) + "\n")
