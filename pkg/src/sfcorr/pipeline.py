"""Glue between trained encoders, fusion, propagation and the metrics."""

from __future__ import annotations

import numpy as np

from .encoder import EncoderPair, encode_dense
from .errors import ShapeError
from .fusion import fuse_feature_maps
from .metrics import instance_ref_size, metric_pck, video_jf
from .propagation import (PropagationConfig, decode_keypoints, decode_segmentation, keypoints_to_grid,
                          labels_to_grid, propagate_video)


def encode_video(pair: EncoderPair, frames: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Eval-mode dense features [T, G, G, C] for frames [T, 3, H, W]."""
    frames = np.asarray(frames, dtype=pair.dtype)
    return np.concatenate([encode_dense(pair, frames[i:i + chunk]) for i in range(0, len(frames), chunk)])


def video_features(fine: EncoderPair | None, frames: np.ndarray, semantic: EncoderPair | None = None,
                   lam: float = 1.75) -> np.ndarray:
    """Per-frame matching features: one network's map, or the fused map when both are given."""
    if fine is None and semantic is None:
        raise ValueError("need at least one encoder")
    if semantic is None:
        return encode_video(fine, frames)
    if fine is None:
        return encode_video(semantic, frames)
    fused = fuse_feature_maps(encode_video(semantic, frames), encode_video(fine, frames), lam)
    return fused.normalized()


def propagate_segmentation(features: np.ndarray, first_labels: np.ndarray, config: PropagationConfig,
                           n_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Soft label grids [T, G, G, L] and decoded label images [T, H, W]."""
    first_labels = np.asarray(first_labels)
    if n_classes is None:
        n_classes = int(first_labels.max()) + 1
    grid = features.shape[1:3]
    soft = propagate_video(list(features), labels_to_grid(first_labels, n_classes, grid), config)
    decoded = np.stack([decode_segmentation(s, first_labels.shape) for s in soft])
    decoded[0] = first_labels
    return soft, decoded


def propagate_keypoints(features: np.ndarray, first_kps: np.ndarray, config: PropagationConfig,
                        image_size: tuple[int, int]) -> np.ndarray:
    """Keypoint tracks [T, K, 2]; frame 0 keeps the given positions."""
    grid = features.shape[1:3]
    soft = propagate_video(list(features), keypoints_to_grid(first_kps, grid, image_size), config, keypoints=True)
    out = np.stack([decode_keypoints(s, image_size) for s in soft])
    out[0] = first_kps
    return out


def segmentation_scores(pred: np.ndarray, gt: np.ndarray) -> dict:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    rows, j_m, f_m = video_jf(pred, gt)
    return {"rows": rows, "J": j_m, "F": f_m, "JF": (j_m + f_m) / 2}


def keypoint_scores(pred: np.ndarray, gt: np.ndarray, alphas=(0.1, 0.2), skip_first: bool = True) -> dict:
    rows = []
    for p, g in zip(pred, gt):
        ref = instance_ref_size(g)
        rows.append(tuple(metric_pck(p, g, a, ref) for a in alphas))
    used = rows[1:] if skip_first and len(rows) > 1 else rows
    return {"rows": rows, **{f"PCK@{a}": float(np.mean([r[i] for r in used])) for i, a in enumerate(alphas)}}
