"""Recurrent label propagation through a video with restricted top-k attention.

Frame t is labelled from frame 0 (ground truth) plus the ``context_m``
preceding predicted frames. For each query cell, affinities exp(cos / tau)
to context cells within Chebyshev radius ``radius`` (in grid cells) are
computed, the ``top_k`` largest kept (ties to the lowest (frame, row, col))
and their labels averaged with the renormalized affinities as weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .data.netpbm import encode_pgm
from .errors import ConfigError, ShapeError
from .fusion import FusedFeatureMap, l2norm


@dataclass(frozen=True)
class PropagationConfig:
    top_k: int = 10
    context_m: int = 20
    radius: int = 12
    tau: float = 0.07
    lam: float = 1.75

    def validate(self) -> None:
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.radius < 0:
            raise ConfigError(f"radius must be >= 0, got {self.radius}")
        if self.context_m < 0:
            raise ConfigError(f"context_m must be >= 0, got {self.context_m}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


# object-mask settings for a single network and for fused features
SINGLE_NETWORK = PropagationConfig(top_k=10, context_m=20, radius=12)
FUSED_NETWORK = PropagationConfig(top_k=15, context_m=20, radius=15, lam=1.75)


def desk_config(grid: int, fused: bool = False, **overrides) -> PropagationConfig:
    """Default k and m with the radius rescaled to a small grid (about grid / 3)."""
    base = FUSED_NETWORK if fused else SINGLE_NETWORK
    radius = max(1, round(grid / 3)) + (1 if fused else 0)
    params = dict(top_k=base.top_k, context_m=base.context_m, radius=radius, tau=base.tau, lam=base.lam)
    params.update(overrides)
    return PropagationConfig(**params)


@dataclass
class SparseAffinity:
    values: np.ndarray   # [Q, N] exp(cos / tau); 0 in unused slots
    index: np.ndarray    # [Q, N] flat context index frame * Q + cell; -1 in unused slots
    grid: tuple[int, int]
    n_frames: int

    def row(self, q: int) -> tuple[np.ndarray, np.ndarray]:
        ok = self.index[q] >= 0
        return self.values[q][ok], self.index[q][ok]

    @property
    def counts(self) -> np.ndarray:
        return (self.index >= 0).sum(axis=1)


def _as_unit_grid(fmap) -> np.ndarray:
    if isinstance(fmap, FusedFeatureMap):
        return fmap.normalized()
    return l2norm(np.asarray(fmap, dtype=np.float64))


def restricted_affinity(query_map, context_maps, radius: int, tau: float) -> SparseAffinity:
    """Affinities of each query cell to nearby cells of every context frame."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    q = _as_unit_grid(query_map)
    ctx = np.stack([_as_unit_grid(c) for c in context_maps])
    gh, gw, c = q.shape
    if ctx.shape[1:] != q.shape:
        raise ShapeError(f"context maps {ctx.shape[1:]} do not match query map {q.shape}")
    values, index = kernels.restricted_affinity(
        np.ascontiguousarray(q.reshape(gh * gw, c)), np.ascontiguousarray(ctx.reshape(len(ctx), gh * gw, c)),
        gh, gw, int(radius), 1.0 / tau)
    aff = SparseAffinity(values, index, (gh, gw), len(ctx))
    assert np.all(aff.counts > 0), "empty neighbourhood"
    return aff


def propagate_frame(affinity: SparseAffinity, context_labels: np.ndarray, top_k: int) -> np.ndarray:
    """Labels [G, G, L] for the query frame from context labels [F, G, G, L]."""
    gh, gw = affinity.grid
    labels = np.asarray(context_labels, dtype=np.float64)
    if labels.shape[:3] != (affinity.n_frames, gh, gw):
        raise ShapeError(f"context labels {labels.shape} do not match affinity ({affinity.n_frames}, {gh}, {gw})")
    flat = np.ascontiguousarray(labels.reshape(affinity.n_frames * gh * gw, -1))
    out = kernels.topk_transfer(affinity.values, affinity.index, flat, int(top_k))
    return out.reshape(gh, gw, -1)


def context_frames(t: int, m: int) -> list[int]:
    """Frame 0 plus the ``m`` frames preceding ``t``, ascending, without repeats."""
    return [0] + list(range(max(1, t - m), t))


def propagate_video(features, first_labels: np.ndarray, config: PropagationConfig = SINGLE_NETWORK,
                    keypoints: bool = False) -> np.ndarray:
    """Propagate ``first_labels`` [G, G, L] through per-frame features.

    ``features`` is a sequence of [G, G, C] maps or FusedFeatureMaps. In
    keypoint mode every channel is a spatial distribution and is
    renormalized over the grid after each frame.
    """
    config.validate()
    feats = [_as_unit_grid(f) for f in features]
    if not feats:
        raise ShapeError("video has no frames")
    first = np.asarray(first_labels, dtype=np.float64)
    grid = feats[0].shape[:2]
    if first.shape[:2] != grid:
        raise ShapeError(f"first-frame labels on grid {first.shape[:2]} but features on grid {grid}")
    out = np.empty((len(feats),) + first.shape)
    out[0] = first
    for t in range(1, len(feats)):
        ctx = context_frames(t, config.context_m)
        aff = restricted_affinity(feats[t], [feats[i] for i in ctx], config.radius, config.tau)
        pred = propagate_frame(aff, out[ctx], config.top_k)
        if keypoints:
            sums = pred.sum(axis=(0, 1))
            lost = sums <= 0
            pred = pred / np.where(lost, 1.0, sums)
            pred[..., lost] = out[t - 1][..., lost]
        out[t] = pred
    return out


# --------------------------------------------------------------------------
# label encoding / decoding
# --------------------------------------------------------------------------

def labels_to_grid(label_img: np.ndarray, n_classes: int, grid: tuple[int, int]) -> np.ndarray:
    """Per-cell class fractions [G, G, L] of an integer label image."""
    label_img = np.asarray(label_img)
    H, W = label_img.shape
    gh, gw = grid
    if label_img.max(initial=0) >= n_classes:
        raise ShapeError(f"label value {label_img.max()} >= number of classes {n_classes}")
    rows = np.arange(H) * gh // H
    cols = np.arange(W) * gw // W
    out = np.zeros((gh, gw, n_classes))
    np.add.at(out, (rows[:, None], cols[None, :], label_img), 1.0)
    return out / out.sum(axis=-1, keepdims=True)


def decode_segmentation(grid_labels: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Per-cell argmax, nearest-neighbour upsampled to ``image_size`` (H, W)."""
    cls = np.argmax(grid_labels, axis=-1).astype(np.uint8)
    gh, gw = cls.shape
    H, W = image_size
    return cls[(np.arange(H) * gh // H)[:, None], (np.arange(W) * gw // W)[None, :]]


def keypoints_to_grid(kps: np.ndarray, grid: tuple[int, int], image_size: tuple[int, int]) -> np.ndarray:
    """One-hot spatial distribution [G, G, K] at the cell containing each keypoint."""
    gh, gw = grid
    H, W = image_size
    out = np.zeros((gh, gw, len(kps)))
    for k, (x, y) in enumerate(kps):
        i = int(np.clip(np.floor(y * gh / H), 0, gh - 1))
        j = int(np.clip(np.floor(x * gw / W), 0, gw - 1))
        out[i, j, k] = 1.0
    return out


def decode_keypoints(grid_labels: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """(x, y) image position of each channel's argmax cell center."""
    gh, gw, k = grid_labels.shape
    H, W = image_size
    flat = grid_labels.reshape(gh * gw, k).argmax(axis=0)
    i, j = np.divmod(flat, gw)
    return np.stack([(j + 0.5) * W / gw, (i + 0.5) * H / gh], axis=1)


# --------------------------------------------------------------------------
# heatmaps
# --------------------------------------------------------------------------

def affinity_heatmap(source_map, target_map, source_cell: tuple[int, int]) -> np.ndarray:
    """Cosine similarity of every target cell to ``source_cell``, min-max scaled to uint8.

    A constant similarity map becomes uniform 128.
    """
    src = _as_unit_grid(source_map)
    tgt = _as_unit_grid(target_map)
    i, j = source_cell
    if not (0 <= i < src.shape[0] and 0 <= j < src.shape[1]):
        raise IndexError(f"cell {source_cell} outside grid {src.shape[:2]}")
    sim = tgt @ src[i, j]
    lo, hi = float(sim.min()), float(sim.max())
    if hi - lo <= 1e-12:
        return np.full(sim.shape, 128, dtype=np.uint8)
    return np.rint((sim - lo) / (hi - lo) * 255).astype(np.uint8)


def dump_affinity_heatmap(features, source_cell, target_frame: int, path=None, source_frame: int = 0) -> np.ndarray:
    """Heatmap of ``features[target_frame]`` against a cell of ``features[source_frame]``;
    written as PGM when ``path`` is given."""
    img = affinity_heatmap(features[source_frame], features[target_frame], source_cell)
    if path is not None:
        Path(path).write_bytes(encode_pgm(img))
    return img
