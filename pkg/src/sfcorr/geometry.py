"""Crop geometry: sampling, cell-to-image coordinate map and positive masks.

Coordinates are (x, y) in source-image pixels, with a cell's location taken
at its center. Mask radii are dimensionless: a distance is divided by the
geometric mean of the two views' mean cell spacings, so ``r = 0.5`` means
"closer than half a cell" regardless of crop size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import ConfigError

ASPECT_RANGE = (3 / 4, 4 / 3)
MAX_CROP_TRIES = 10


@dataclass(frozen=True)
class CropGeometry:
    source_size: tuple[int, int]      # (H_img, W_img)
    box: tuple[int, int, int, int]    # (x0, y0, w, h)
    flipped: bool = False
    out_size: int = 64
    grid: tuple[int, int] = (16, 16)  # (G_h, G_w)

    def __post_init__(self):
        x0, y0, w, h = self.box
        H, W = self.source_size
        if w < 1 or h < 1:
            raise ConfigError(f"crop box must be at least 1x1, got {self.box}")
        if x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H:
            raise ConfigError(f"crop box {self.box} exceeds source frame {W}x{H}")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ConfigError(f"grid must be positive, got {self.grid}")

    @property
    def cell_spacing(self) -> tuple[float, float]:
        """(dy, dx) between neighbouring cell centers, in source pixels."""
        return self.box[3] / self.grid[0], self.box[2] / self.grid[1]

    @property
    def mean_spacing(self) -> float:
        dy, dx = self.cell_spacing
        return (dy + dx) / 2

    def with_grid(self, grid, out_size=None) -> CropGeometry:
        return replace(self, grid=tuple(grid), out_size=self.out_size if out_size is None else out_size)

    def flip(self) -> CropGeometry:
        return replace(self, flipped=not self.flipped)


def full_frame(source_size, out_size=64, grid=(16, 16)) -> CropGeometry:
    H, W = source_size
    return CropGeometry(tuple(source_size), (0, 0, W, H), False, out_size, tuple(grid))


def sample_crop(source_size, gamma1: float, gamma2: float, rng: np.random.Generator,
                aspect_range=ASPECT_RANGE, out_size: int = 64, grid=(16, 16)) -> CropGeometry:
    """Random crop whose area fraction is uniform in [gamma1, gamma2].

    Aspect ratio is log-uniform in ``aspect_range``; the position is uniform
    over valid placements. After ``MAX_CROP_TRIES`` invalid draws the whole
    frame is used.
    """
    if not 0 <= gamma1 <= gamma2 <= 1:
        raise ConfigError(f"crop scale bounds must satisfy 0 <= gamma1 <= gamma2 <= 1, got {gamma1}, {gamma2}")
    H, W = source_size
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])
    for _ in range(MAX_CROP_TRIES):
        area = rng.uniform(gamma1, gamma2) * H * W
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(area * ratio)))
        h = int(round(math.sqrt(area / ratio)))
        if 1 <= w <= W and 1 <= h <= H:
            x0 = int(rng.integers(0, W - w + 1))
            y0 = int(rng.integers(0, H - h + 1))
            return CropGeometry((H, W), (x0, y0, w, h), False, out_size, tuple(grid))
    return full_frame((H, W), out_size, grid)


def map_to_image(geom: CropGeometry, i: int, j: int) -> tuple[float, float]:
    """Image-space (x, y) of the center of feature cell (row i, col j)."""
    gh, gw = geom.grid
    if not (0 <= i < gh and 0 <= j < gw):
        raise IndexError(f"cell ({i}, {j}) outside grid {gh}x{gw}")
    x0, y0, w, h = geom.box
    jj = gw - 1 - j if geom.flipped else j
    return x0 + (jj + 0.5) * w / gw, y0 + (i + 0.5) * h / gh


def cell_centers(geom: CropGeometry) -> np.ndarray:
    """[G_h*G_w, 2] array of (x, y) cell centers in row-major cell order."""
    gh, gw = geom.grid
    x0, y0, w, h = geom.box
    cols = np.arange(gw)
    if geom.flipped:
        cols = gw - 1 - cols
    xs = x0 + (cols + 0.5) * w / gw
    ys = y0 + (np.arange(gh) + 0.5) * h / gh
    out = np.empty((gh, gw, 2))
    out[..., 0] = xs[None, :]
    out[..., 1] = ys[:, None]
    return out.reshape(-1, 2)


def mask_threshold_sq(geom_a: CropGeometry, geom_b: CropGeometry, r: float) -> float:
    """Squared pixel distance below which two cells are positives."""
    return r * r * geom_a.mean_spacing * geom_b.mean_spacing


def build_positive_mask(geom_a: CropGeometry, geom_b: CropGeometry, r: float) -> np.ndarray:
    """Binary [P, Q] mask; entry (i, j) is 1 iff cell i of view A lies within
    ``r`` cell units of cell j of view B in the source image."""
    if tuple(geom_a.source_size) != tuple(geom_b.source_size):
        raise ConfigError("positive mask needs both views cut from the same source frame")
    if math.isinf(r):
        return np.ones((geom_a.grid[0] * geom_a.grid[1], geom_b.grid[0] * geom_b.grid[1]), dtype=np.uint8)
    return kernels.radius_mask(cell_centers(geom_a), cell_centers(geom_b), mask_threshold_sq(geom_a, geom_b, r))


def overlap_fraction(geom_a: CropGeometry, geom_b: CropGeometry) -> float:
    """Intersection area over the smaller box area."""
    ax, ay, aw, ah = geom_a.box
    bx, by, bw, bh = geom_b.box
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    return iw * ih / min(aw * ah, bw * bh)


def sample_view_geometries(source_size, gamma1, gamma2, r, rng, out_size=64, grid=(16, 16), hflip=False,
                           aspect_range=ASPECT_RANGE):
    """Two crop geometries whose positive mask is non-empty.

    Pairs are redrawn up to ``MAX_CROP_TRIES`` times; after that both views
    are the same full-frame crop. Returns ``(geom_a, geom_b, mask)``.
    """
    for _ in range(MAX_CROP_TRIES):
        ga = sample_crop(source_size, gamma1, gamma2, rng, aspect_range, out_size, grid)
        gb = sample_crop(source_size, gamma1, gamma2, rng, aspect_range, out_size, grid)
        if hflip:
            if rng.random() < 0.5:
                ga = ga.flip()
            if rng.random() < 0.5:
                gb = gb.flip()
        mask = build_positive_mask(ga, gb, r)
        if mask.any():
            return ga, gb, mask
    ga = full_frame(source_size, out_size, grid)
    return ga, ga, build_positive_mask(ga, ga, r)
