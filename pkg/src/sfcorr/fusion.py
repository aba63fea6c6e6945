"""Late fusion of semantic and fine-grained dense features.

Each half is L2-normalized per location, the fine-grained half is scaled by
``lam`` and the two are concatenated. Matching re-normalizes the fused
vector, so for non-zero halves the fused cosine equals
``(sim_s + lam**2 * sim_f) / (1 + lam**2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

EPS = 1e-12


def l2norm(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x / np.sqrt((x * x).sum(axis=axis, keepdims=True) + EPS)


@dataclass
class FusedFeatureMap:
    data: np.ndarray          # [..., G, G, C_s + C_f]
    lam: float
    c_s: int
    c_f: int
    tags: tuple[str, str] = ("semantic", "fine")

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[-3], self.data.shape[-2]

    @property
    def semantic(self) -> np.ndarray:
        return self.data[..., :self.c_s]

    @property
    def fine(self) -> np.ndarray:
        return self.data[..., self.c_s:]

    def normalized(self) -> np.ndarray:
        """Unit-norm fused vectors, as used for matching."""
        return l2norm(self.data)


def resize_bilinear(fmap: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of [..., h, w, C] to [..., gh, gw, C] with half-cell centers."""
    h, w = fmap.shape[-3], fmap.shape[-2]
    gh, gw = grid
    if (h, w) == (gh, gw):
        return fmap

    def axis_weights(src, dst):
        pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), max(src - 2, 0))
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, gh)
    x0, x1, fx = axis_weights(w, gw)
    rows = fmap[..., y0, :, :] * (1 - fy)[:, None, None] + fmap[..., y1, :, :] * fy[:, None, None]
    return rows[..., :, x0, :] * (1 - fx)[:, None] + rows[..., :, x1, :] * fx[:, None]


def fuse_feature_maps(f_s: np.ndarray, f_f: np.ndarray, lam: float) -> FusedFeatureMap:
    """[L2Norm(F_s), lam * L2Norm(F_f)] per location.

    When the grids differ the coarser map is bilinearly upsampled to the finer
    grid first.
    """
    if lam < 0:
        raise ConfigError(f"fusion weight must be non-negative, got {lam}")
    f_s = np.asarray(f_s, dtype=np.float64)
    f_f = np.asarray(f_f, dtype=np.float64)
    gs, gf = f_s.shape[-3:-1], f_f.shape[-3:-1]
    if gs != gf:
        target = gs if gs[0] * gs[1] >= gf[0] * gf[1] else gf
        f_s, f_f = resize_bilinear(f_s, target), resize_bilinear(f_f, target)
    if f_s.shape[:-1] != f_f.shape[:-1]:
        raise ShapeError(f"cannot fuse maps with grids {f_s.shape[:-1]} and {f_f.shape[:-1]}")
    data = np.concatenate([l2norm(f_s), lam * l2norm(f_f)], axis=-1)
    return FusedFeatureMap(data, float(lam), f_s.shape[-1], f_f.shape[-1])


def fused_affinity(query: FusedFeatureMap, context: FusedFeatureMap, cell=None) -> np.ndarray:
    """Cosine similarity of re-normalized fused vectors.

    With ``cell=(i, j)`` returns that query cell's similarities to every
    context cell, shaped like the context grid; without it, the full
    [Gq*Gq, Gc*Gc] matrix.
    """
    if query.lam != context.lam or (query.c_s, query.c_f) != (context.c_s, context.c_f):
        raise ConfigError(f"query and context fused differently (lam {query.lam} vs {context.lam})")
    q = query.normalized()
    c = context.normalized()
    if cell is not None:
        return c @ q[cell[0], cell[1]]
    return q.reshape(-1, q.shape[-1]) @ c.reshape(-1, c.shape[-1]).T
