"""Finite-difference checks of whole loss graphs at 64-bit on 8x8 inputs."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import Config, HeadsSection, BackboneSection
from .data.loader import FrameDataset, batch_iterator
from .data.synthetic import make_videos
from .encoder import backbone_forward, project_and_predict
from .engine import GradCheckReport, Tensor, grad_check
from .engine.ops import sum as tsum
from .train import build_model, fc_terms, total_loss

TINY = Config(backbone=BackboneSection(channels=(4, 6, 6, 6)), heads=HeadsSection(8, 5, 8, 5))


def small_batch(size: int = 8, stride: int = 4, n: int = 4, seed: int = 0):
    """``n`` view pairs of a synthetic frame at ``size`` px with non-empty masks."""
    frames = make_videos(1, seed=seed, n_frames=2)[0].frames
    grid = (size // stride,) * 2
    return next(batch_iterator(FrameDataset([frames]), n, seed, out_size=size, grid=grid, r=1.0))


def _with_input(cfg: Config, size: int) -> Config:
    return cfg.replace(backbone=replace(cfg.backbone, input_size=size))


def loss_graph_check(kind: str, cfg: Config, tol: float = 1e-4, seed: int = 0, size: int = 8,
                     sample: int | None = None) -> GradCheckReport:
    """Gradcheck of the full ``kind`` ("fc" or "joint") loss graph, online params at float64."""
    cfg = _with_input(cfg, size)
    pair = build_model(cfg, kind, dtype=np.float64)
    batch = small_batch(size, pair.backbone.total_stride, seed=seed)

    def loss_fn():
        terms = fc_terms(pair, batch, cfg, update_stats=False, with_global=kind == "joint")
        return total_loss(kind, terms, cfg)

    return grad_check(loss_fn, pair.online, tol=tol, seed=seed, sample=sample, raise_on_fail=False,
                      kink_retry=sample is not None)


def projection_path_check(cfg: Config = TINY, tol: float = 1e-4, seed: int = 0, size: int = 8) -> GradCheckReport:
    """Gradcheck of the composed P1 = pred(proj(backbone(x))) path under a random linear readout."""
    cfg = _with_input(cfg, size)
    pair = build_model(cfg, "fc", dtype=np.float64)
    batch = small_batch(size, pair.backbone.total_stride, seed=seed)
    x = Tensor(batch.view1.astype(np.float64))
    g = pair.backbone.grid
    shape = (len(x.data), g[0], g[1], cfg.heads.out_dim)
    w = Tensor(np.random.default_rng(seed).standard_normal(shape) / np.prod(shape))

    def loss_fn():
        f1 = backbone_forward(pair.backbone, pair.online, pair.online_buffers, x, training=True, update_stats=False)
        p1, _ = project_and_predict(pair, f1, f1)
        return tsum(p1 * w)

    return grad_check(loss_fn, pair.online, tol=tol, seed=seed, raise_on_fail=False)


def composed_graph_checks(tol: float = 1e-4, seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Tiny-width graphs checked on every entry; FC-small graphs on sampled entries."""
    return [
        ("fc_loss_tiny", loss_graph_check("fc", TINY, tol, seed)),
        ("joint_loss_tiny", loss_graph_check("joint", TINY, tol, seed)),
        ("p1_path_tiny", projection_path_check(TINY, tol, seed)),
        ("fc_loss_small", loss_graph_check("fc", Config(), tol, seed, sample=6)),
        ("joint_loss_small", loss_graph_check("joint", Config(), tol, seed, sample=6)),
    ]
