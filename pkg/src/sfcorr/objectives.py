"""Training objectives: InfoNCE with a negative queue, the pooled BYOL loss,
the masked dense local loss, and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, concat, l2_normalize, logsumexp, mean, pairwise_cosine, reshape
from .engine.ops import sum as tsum
from .errors import ConfigError, EmptyMaskError, ShapeError


class NegativeQueue:
    """FIFO ring buffer of unit-norm negatives, pre-filled with random unit vectors."""

    def __init__(self, capacity: int, dim: int, seed: int = 0, dtype=np.float32):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be positive, got {capacity}")
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((capacity, dim))
        self._buf = (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(dtype)
        self.cursor = 0
        self.filled = 0

    @property
    def capacity(self) -> int:
        return self._buf.shape[0]

    @property
    def vectors(self) -> np.ndarray:
        return self._buf

    def __len__(self) -> int:
        return self.filled

    def enqueue(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=self._buf.dtype)
        if batch.ndim != 2 or batch.shape[1] != self._buf.shape[1]:
            raise ShapeError(f"queue holds {self._buf.shape[1]}-d vectors, got batch {batch.shape}")
        norms = np.linalg.norm(batch, axis=1, keepdims=True)
        batch = batch / np.maximum(norms, 1e-12)
        for row in batch[-self.capacity:]:
            self._buf[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
        self.filled = min(self.capacity, self.filled + len(batch))


@dataclass
class LossReport:
    loss: float
    terms: dict[str, float] = field(default_factory=dict)
    positives: int = 0


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x.detach()
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def info_nce(z1: Tensor, z2, queue, tau: float) -> Tensor:
    """Mean InfoNCE over the batch with ``queue`` rows as negatives.

    ``z1`` and ``z2`` are expected unit-norm [N, D]; ``queue`` is a
    :class:`NegativeQueue` or a [K, D] array and is treated as a constant.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    negs = queue.vectors if isinstance(queue, NegativeQueue) else np.asarray(queue)
    if negs.shape[0] == 0:
        raise ConfigError("InfoNCE needs at least one negative")
    z2 = z2 if isinstance(z2, Tensor) else Tensor(np.asarray(z2, dtype=z1.dtype))
    inv = 1.0 / tau
    pos = tsum(z1 * z2, axis=1) * inv
    neg = (z1 @ Tensor(np.ascontiguousarray(negs.T, dtype=z1.dtype))) * inv
    logits = concat([reshape(pos, (-1, 1)), neg], axis=1)
    return mean(logsumexp(logits, axis=1) - pos)


def global_byol_loss(p1: Tensor, z2) -> Tensor:
    """Mean negative cosine similarity; ``z2`` is a constant target."""
    z2 = _const(z2, p1)
    return -mean(tsum(l2_normalize(p1, axis=-1) * l2_normalize(z2, axis=-1), axis=-1))


def _flat(x: Tensor) -> Tensor:
    return reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x


def dense_local_loss(p1: Tensor, z2, mask) -> Tensor:
    """-(sum of masked cosine similarities) / (number of positives).

    ``p1`` and ``z2`` are [G, G, D] (or already flattened [P, D]) grids;
    ``mask`` is the [P, Q] binary positive mask.
    """
    mask = np.asarray(mask)
    count = float(mask.sum())
    if count == 0:
        raise EmptyMaskError("positive mask is empty; dense loss is undefined")
    p = _flat(p1)
    z = _flat(_const(z2, p1))
    if mask.shape != (p.shape[0], z.shape[0]):
        raise ShapeError(f"mask {mask.shape} does not match grids {p.shape[0]} x {z.shape[0]}")
    s = pairwise_cosine(p, z)
    return -(tsum(s * Tensor(mask.astype(p.dtype))) * (1.0 / count))


def batch_dense_local_loss(p1: Tensor, z2, masks) -> Tensor:
    """Batch mean of :func:`dense_local_loss` for [N, G, G, D] inputs and [N, P, Q] masks."""
    masks = np.asarray(masks)
    counts = masks.reshape(len(masks), -1).sum(axis=1).astype(np.float64)
    if np.any(counts == 0):
        raise EmptyMaskError(f"positive mask empty for batch element {int(np.argmin(counts))}")
    n = p1.shape[0]
    p = reshape(p1, (n, -1, p1.shape[-1]))
    z2 = _const(z2, p1)
    z = reshape(z2, (n, -1, z2.shape[-1]))
    s = pairwise_cosine(p, z)
    weights = (masks / counts[:, None, None]).astype(p.dtype)
    return -(tsum(s * Tensor(weights)) * (1.0 / n))


def joint_loss(local: Tensor, global_: Tensor, alpha: float = 1.0) -> Tensor:
    if alpha < 0:
        raise ConfigError(f"joint loss weight must be non-negative, got {alpha}")
    return local + global_ * alpha
