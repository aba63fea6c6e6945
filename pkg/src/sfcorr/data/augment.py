"""View-pair construction: crop + bilinear resize, optional photometric ops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..geometry import CropGeometry, sample_view_geometries

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentationSpec:
    """Photometric switches on top of the always-on random crop.

    Jitter follows the MoCo v2 recipe (brightness/contrast/saturation 0.4,
    hue 0.1, applied with probability 0.8), scaled by ``color_jitter``.
    """

    hflip: bool = False
    color_jitter: float = 0.0
    jitter_p: float = 0.8
    gaussian_blur: bool = False
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_p: float = 0.5
    grayscale: bool = False
    grayscale_p: float = 1.0

    @property
    def photometric(self) -> bool:
        return self.color_jitter > 0 or self.gaussian_blur or self.grayscale


CROP_ONLY = AugmentationSpec()
MOCO_V2 = AugmentationSpec(hflip=True, color_jitter=1.0, gaussian_blur=True, grayscale=True, grayscale_p=0.2)


def resize_crop(image: np.ndarray, geom: CropGeometry) -> np.ndarray:
    """Bilinear resample of ``geom.box`` to ``out_size`` x ``out_size``.

    Half-pixel-center convention: output pixel u samples source coordinate
    x0 + (u + 0.5) * w / out - 0.5 in pixel-index units; mirrored when
    the geometry is flipped.
    """
    _, H, W = image.shape
    x0, y0, w, h = geom.box
    n = geom.out_size
    u = np.arange(n)
    if geom.flipped:
        u = n - 1 - u
    xs = x0 + (u + 0.5) * w / n - 0.5
    ys = y0 + (np.arange(n) + 0.5) * h / n - 0.5
    xs = np.clip(xs, 0, W - 1)
    ys = np.clip(ys, 0, H - 1)
    xi = np.minimum(np.floor(xs).astype(np.int64), W - 2) if W > 1 else np.zeros(n, np.int64)
    yi = np.minimum(np.floor(ys).astype(np.int64), H - 2) if H > 1 else np.zeros(n, np.int64)
    fx = (xs - xi).astype(image.dtype) if W > 1 else np.zeros(n, image.dtype)
    fy = (ys - yi).astype(image.dtype) if H > 1 else np.zeros(n, image.dtype)
    xi1 = np.minimum(xi + 1, W - 1)
    yi1 = np.minimum(yi + 1, H - 1)
    rows = image[:, yi] * (1 - fy)[None, :, None] + image[:, yi1] * fy[None, :, None]
    return (rows[:, :, xi] * (1 - fx) + rows[:, :, xi1] * fx).astype(image.dtype)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    y = np.tensordot(LUMA.astype(image.dtype), image, axes=1)
    return np.broadcast_to(y, image.shape).copy()


def _hue_rotate(image: np.ndarray, turns: float) -> np.ndarray:
    # rotation of the chroma plane in YIQ space
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    c, s = np.cos(2 * np.pi * turns), np.sin(2 * np.pi * turns)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return np.tensordot(m.astype(image.dtype), image, axes=1)


def color_jitter(image: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(1 - 0.4 * strength, 1 + 0.4 * strength)
    c = rng.uniform(1 - 0.4 * strength, 1 + 0.4 * strength)
    s = rng.uniform(1 - 0.4 * strength, 1 + 0.4 * strength)
    h = rng.uniform(-0.1 * strength, 0.1 * strength)
    out = image * b
    gray_mean = float(np.tensordot(LUMA, out, axes=1).mean())
    out = (out - gray_mean) * c + gray_mean
    gray = np.tensordot(LUMA.astype(out.dtype), out, axes=1)[None]
    out = (out - gray) * s + gray
    out = _hue_rotate(out, h)
    return np.clip(out, 0, 1).astype(image.dtype)


def apply_photometric(image: np.ndarray, aug: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    out = image
    if aug.color_jitter > 0 and rng.random() < aug.jitter_p:
        out = color_jitter(out, aug.color_jitter, rng)
    if aug.grayscale and rng.random() < aug.grayscale_p:
        out = to_grayscale(out)
    if aug.gaussian_blur and rng.random() < aug.blur_p:
        sigma = rng.uniform(*aug.blur_sigma) * image.shape[-1] / 224
        out = np.stack([gaussian_filter(ch, sigma, mode="nearest") for ch in out]).astype(image.dtype)
    return out


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    geom_a: CropGeometry
    geom_b: CropGeometry
    mask: np.ndarray


def make_view_pair(image: np.ndarray, gamma1: float, gamma2: float, aug: AugmentationSpec = CROP_ONLY,
                   out_size: int = 64, rng: np.random.Generator | None = None,
                   photo_rng: np.random.Generator | None = None, r: float = 0.5,
                   grid=(16, 16)) -> ViewPair:
    """Two augmented views of ``image`` [3, H, W] and their positive mask.

    Geometry draws come from ``rng`` only; photometric draws from
    ``photo_rng``, so toggling photometric ops never moves the crops.
    """
    rng = np.random.default_rng() if rng is None else rng
    photo_rng = rng if photo_rng is None else photo_rng
    _, H, W = image.shape
    ga, gb, mask = sample_view_geometries((H, W), gamma1, gamma2, r, rng, out_size, grid, aug.hflip)
    v1 = resize_crop(image, ga)
    v2 = resize_crop(image, gb)
    if aug.photometric:
        v1 = apply_photometric(v1, aug, photo_rng)
        v2 = apply_photometric(v2, aug, photo_rng)
    return ViewPair(v1, v2, ga, gb, mask)
