"""Training targets from head annotations: Gaussian density maps and count groups."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DegenerateRangeError, ShapeError

MIN_SIGMA = 0.5
NUM_GROUPS = 10


@dataclass
class HeadAnnotation:
    """Head centres for one image; ``points[:, 0]`` is the column, ``points[:, 1]`` the row."""

    points: np.ndarray
    image_size: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ShapeError(f"points must be an (n, 2) array of (x, y), got shape {pts.shape}")
        h, w = (int(v) for v in self.image_size)
        if h <= 0 or w <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        bad = ~((pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h))
        if bad.any():
            first = pts[np.argmax(bad)]
            raise ValueError(
                f"{int(bad.sum())} head point(s) outside the {h}x{w} image, e.g. (x={first[0]}, y={first[1]})"
            )
        self.points = pts
        self.image_size = (h, w)

    @property
    def count(self):
        return len(self.points)


@dataclass(frozen=True)
class KernelConfig:
    mode: str = "adaptive"
    beta: float = 0.3
    k_neighbors: int = 3
    fixed_sigma: float = 3.0
    truncation_radius_sigmas: float = 4.0

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError(f"kernel mode must be 'adaptive' or 'fixed', got {self.mode!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be at least 1")
        if not self.fixed_sigma > 0:
            raise ValueError("fixed_sigma must be positive")
        if not self.truncation_radius_sigmas > 0:
            raise ValueError("truncation_radius_sigmas must be positive")


@dataclass
class DensityMap:
    grid: np.ndarray
    mode: str = "adaptive"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.grid.shape

    def count(self):
        return float(self.grid.sum())


@dataclass(frozen=True)
class CountRange:
    c_min: float
    c_max: float

    def __post_init__(self):
        if not self.c_max > self.c_min:
            raise DegenerateRangeError(
                f"count range needs c_max > c_min, got ({self.c_min}, {self.c_max}); "
                "the training split must contain images with different head counts"
            )


def knn_mean_distances(points, k, chunk=1024):
    """Mean distance from each point to its ``k`` nearest other points.

    Entries are NaN where fewer than ``k`` other points exist.  Exact O(n^2)
    scan, chunked over rows to bound memory.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    out = np.full(n, np.nan)
    if n - 1 < k:
        return out
    for start in range(0, n, chunk):
        block = pts[start:start + chunk]
        d = np.sqrt(((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1))
        d[np.arange(len(block)), np.arange(start, start + len(block))] = np.inf
        nearest = np.sort(np.partition(d, k - 1, axis=1)[:, :k], axis=1)
        out[start:start + len(block)] = nearest.mean(axis=1)
    return out


def sigma_for_head(mean_distance, cfg: KernelConfig):
    if cfg.mode == "fixed" or mean_distance is None or not np.isfinite(mean_distance):
        sigma = cfg.fixed_sigma
    else:
        sigma = cfg.beta * float(mean_distance)
    return max(sigma, MIN_SIGMA)


def _axis_weights(center, sigma, radius, size):
    pivot = int(math.floor(center))
    lo, hi = max(pivot - radius, 0), min(pivot + radius, size - 1)
    idx = np.arange(lo, hi + 1)
    # pixel i spans [i, i + 1); evaluate at its centre
    g = np.exp(-((idx + 0.5 - center) ** 2) / (2.0 * sigma * sigma))
    return lo, g / g.sum()


def render_density_map(annotation: HeadAnnotation, cfg: KernelConfig = KernelConfig()) -> DensityMap:
    """Sum of one truncated, renormalized Gaussian per head.

    Each stamp is separable and clipped to the image, then rescaled so its
    in-image mass is exactly one; the map therefore sums to the head count.
    """
    h, w = annotation.image_size
    grid = np.zeros((h, w))
    pts = annotation.points
    dbar = knn_mean_distances(pts, cfg.k_neighbors) if cfg.mode == "adaptive" else np.full(len(pts), np.nan)
    sigmas = [sigma_for_head(d, cfg) for d in dbar]
    for (x, y), sigma in zip(pts, sigmas):
        radius = int(math.ceil(cfg.truncation_radius_sigmas * sigma))
        r0, gy = _axis_weights(y, sigma, radius, h)
        c0, gx = _axis_weights(x, sigma, radius, w)
        grid[r0:r0 + len(gy), c0:c0 + len(gx)] += np.outer(gy, gx)
    return DensityMap(grid, cfg.mode, {"sigmas": sigmas})


def downsample_sum(density, factor=8):
    """Sum each ``factor x factor`` block; accepts a DensityMap or a 2-D array."""
    grid = density.grid if isinstance(density, DensityMap) else np.asarray(density, dtype=np.float64)
    h, w = grid.shape
    if h % factor or w % factor:
        raise ShapeError(f"density map {h}x{w} is not divisible by {factor}; pad the image first")
    out = grid.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    if isinstance(density, DensityMap):
        return DensityMap(out, density.mode, dict(density.meta, downsample=factor))
    return out


def _round_half_away(value: Fraction) -> int:
    if value >= 0:
        return math.floor(value + Fraction(1, 2))
    return -math.floor(-value + Fraction(1, 2))


def count_group_label(count, count_range: CountRange) -> int:
    """Group index ``min(round(10 (C - Cmin) / (Cmax - Cmin)), 9)`` clamped to ``[0, 9]``.

    Rounding is half away from zero and evaluated in exact rational arithmetic.
    """
    scaled = (Fraction(count) - Fraction(count_range.c_min)) * NUM_GROUPS / (
        Fraction(count_range.c_max) - Fraction(count_range.c_min))
    return int(min(max(_round_half_away(scaled), 0), NUM_GROUPS - 1))
