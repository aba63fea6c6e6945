"""Region similarity J, boundary F-measure and PCK."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import ShapeError

_CROSS = ndimage.generate_binary_structure(2, 1)


def metric_j(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask sizes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (the image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def default_tolerance(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(*shape)))


def metric_f(pred: np.ndarray, gt: np.ndarray, tol_px: int | None = None) -> float:
    """Boundary F-measure with a Chebyshev matching tolerance of ``tol_px`` pixels."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask sizes differ: {pred.shape} vs {gt.shape}")
    tol = default_tolerance(pred.shape) if tol_px is None else int(tol_px)
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    square = np.ones((2 * tol + 1, 2 * tol + 1), dtype=bool)
    near_g = ndimage.binary_dilation(bg, structure=square) if tol > 0 else bg
    near_p = ndimage.binary_dilation(bp, structure=square) if tol > 0 else bp
    precision = float((bp & near_g).sum() / n_p) if n_p else 1.0
    recall = float((bg & near_p).sum() / n_g) if n_g else 1.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def instance_ref_size(kps: np.ndarray) -> float:
    """max(bbox height, bbox width) of a keypoint set."""
    kps = np.asarray(kps, dtype=np.float64)
    span = kps.max(axis=0) - kps.min(axis=0)
    return float(max(span[0], span[1]))


def metric_pck(pred_kps: np.ndarray, gt_kps: np.ndarray, alpha: float, ref_size: float) -> float:
    """Fraction of keypoints within ``alpha * ref_size`` (Euclidean) of ground truth."""
    pred_kps = np.asarray(pred_kps, dtype=np.float64)
    gt_kps = np.asarray(gt_kps, dtype=np.float64)
    if pred_kps.shape != gt_kps.shape:
        raise ShapeError(f"keypoint counts differ: {pred_kps.shape} vs {gt_kps.shape}")
    if len(gt_kps) == 0:
        return 1.0
    dist = np.linalg.norm(pred_kps - gt_kps, axis=-1)
    return float(np.mean(dist <= alpha * ref_size))


def frame_jf(pred_labels: np.ndarray, gt_labels: np.ndarray, objects, tol_px: int | None = None):
    """Mean J and F over ``objects`` (class ids) for one frame of label images."""
    js, fs = [], []
    for k in objects:
        js.append(metric_j(pred_labels == k, gt_labels == k))
        fs.append(metric_f(pred_labels == k, gt_labels == k, tol_px))
    if not js:
        return 1.0, 1.0
    return float(np.mean(js)), float(np.mean(fs))


def video_jf(pred: np.ndarray, gt: np.ndarray, objects=None, skip_first: bool = True):
    """Per-frame (J, F) and their means over a [T, H, W] label video.

    Objects default to the non-zero classes present in the first gt frame;
    frame 0 (the given annotation) is excluded from the means by default.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"label videos differ in shape: {pred.shape} vs {gt.shape}")
    if objects is None:
        objects = [int(k) for k in np.unique(gt[0]) if k != 0]
    rows = [frame_jf(p, g, objects) for p, g in zip(pred, gt)]
    used = rows[1:] if skip_first and len(rows) > 1 else rows
    j_m = float(np.mean([r[0] for r in used]))
    f_m = float(np.mean([r[1] for r in used]))
    return rows, j_m, f_m
