"""Conv backbone, 1x1-conv heads and the online/target parameter pair.

Parameters live in flat ``name -> Tensor`` dicts so the optimizer, the EMA
update and the checkpoint writer can all walk them the same way. Batch-norm
running statistics are kept separately as plain arrays ("buffers").
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, batch_norm, conv2d, global_avg_pool, relu, reshape, transpose
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (32, 64, 64, 64)
    strides: tuple[int, ...] = (2, 2, 1, 1)
    kernels: tuple[int, ...] = (3, 3, 3, 3)
    input_size: int = 64
    residual: bool = False

    def validate(self) -> None:
        if not (len(self.channels) == len(self.strides) == len(self.kernels)) or not self.channels:
            raise ConfigError("backbone channels, strides and kernels must have the same non-zero length")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigError(f"backbone strides must be 1 or 2, got {self.strides}")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"backbone kernels must be odd and positive, got {self.kernels}")
        total = math.prod(self.strides)
        if self.input_size % total:
            raise ConfigError(f"input size {self.input_size} is not divisible by the stride product {total}")

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def grid(self) -> tuple[int, int]:
        g = self.input_size // self.total_stride
        return g, g

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


FC_SMALL = BackboneConfig()
FC_SMALL_8X8 = BackboneConfig(strides=(2, 2, 2, 1))


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 256
    out_dim: int = 64


@dataclass
class EncoderPair:
    backbone: BackboneConfig
    head: HeadConfig
    online: dict[str, Tensor]
    target: dict[str, Tensor]
    online_buffers: dict[str, np.ndarray]
    target_buffers: dict[str, np.ndarray]
    heads: tuple[str, ...] = ("proj", "pred")
    global_head: HeadConfig | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.online.values())).dtype

    def parameter_count(self, which: str = "online") -> int:
        params = self.online if which == "online" else self.target
        return sum(p.data.size for p in params.values())

    def astype(self, dtype) -> EncoderPair:
        cast = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.online.items()}
        tgt = {k: Tensor(v.data.astype(dtype)) for k, v in self.target.items()}
        return EncoderPair(self.backbone, self.head, cast, tgt,
                           {k: v.astype(dtype) for k, v in self.online_buffers.items()},
                           {k: v.astype(dtype) for k, v in self.target_buffers.items()},
                           self.heads, self.global_head, dict(self.meta))


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def _kaiming_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _init_head(rng, prefix, c_in, cfg: HeadConfig, dtype, params, buffers):
    params[f"{prefix}.conv1"] = _kaiming_uniform(rng, (cfg.hidden, c_in, 1, 1), dtype)
    params[f"{prefix}.bn.gamma"] = np.ones(cfg.hidden, dtype)
    params[f"{prefix}.bn.beta"] = np.zeros(cfg.hidden, dtype)
    params[f"{prefix}.conv2"] = _kaiming_uniform(rng, (cfg.out_dim, cfg.hidden, 1, 1), dtype)
    params[f"{prefix}.bias2"] = np.zeros(cfg.out_dim, dtype)
    buffers[f"{prefix}.bn.mean"] = np.zeros(cfg.hidden, dtype)
    buffers[f"{prefix}.bn.var"] = np.ones(cfg.hidden, dtype)


def init_params(backbone: BackboneConfig = FC_SMALL, head: HeadConfig = HeadConfig(), seed: int = 0,
                predictor: bool = True, global_head: HeadConfig | None = None,
                dtype=np.float32) -> EncoderPair:
    """Fresh online parameters plus an exact copy as the target.

    Conv weights are Kaiming-uniform, biases zero, BN gamma 1 and beta 0.
    The optional global (pooled) heads draw from their own stream so adding
    them leaves every other initial value unchanged.
    """
    backbone.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    c_in = 3
    for i, (c, k) in enumerate(zip(backbone.channels, backbone.kernels)):
        params[f"backbone.{i}.conv"] = _kaiming_uniform(rng, (c, c_in, k, k), dtype)
        params[f"backbone.{i}.bn.gamma"] = np.ones(c, dtype)
        params[f"backbone.{i}.bn.beta"] = np.zeros(c, dtype)
        buffers[f"backbone.{i}.bn.mean"] = np.zeros(c, dtype)
        buffers[f"backbone.{i}.bn.var"] = np.ones(c, dtype)
        c_in = c
    heads = ["proj"]
    _init_head(rng, "proj", c_in, head, dtype, params, buffers)
    if predictor:
        heads.append("pred")
        _init_head(rng, "pred", head.out_dim, head, dtype, params, buffers)
    if global_head is not None:
        grng = np.random.default_rng([seed, 1])
        heads += ["gproj", "gpred"]
        _init_head(grng, "gproj", c_in, global_head, dtype, params, buffers)
        _init_head(grng, "gpred", global_head.out_dim, global_head, dtype, params, buffers)

    online = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    target = {k: Tensor(v.copy()) for k, v in params.items() if not _is_predictor(k)}
    target_buffers = {k: v.copy() for k, v in buffers.items() if not _is_predictor(k)}
    return EncoderPair(backbone, head, online, target, buffers, target_buffers, tuple(heads), global_head)


def _is_predictor(name: str) -> bool:
    return name.startswith("pred.") or name.startswith("gpred.")


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------

def _bn(params, buffers, prefix, x, training, update_stats):
    if training:
        rm = buffers[f"{prefix}.mean"] if update_stats else None
        rv = buffers[f"{prefix}.var"] if update_stats else None
    else:
        rm, rv = buffers[f"{prefix}.mean"], buffers[f"{prefix}.var"]
    return batch_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], training=training,
                      running_mean=rm, running_var=rv)


def backbone_forward(cfg: BackboneConfig, params, buffers, x: Tensor, training: bool = False,
                     update_stats: bool = True) -> Tensor:
    """Dense backbone output [N, C, G, G] (no global pooling)."""
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ShapeError(f"expected images [N,3,{cfg.input_size},{cfg.input_size}], got {x.shape}")
    for i, (s, k) in enumerate(zip(cfg.strides, cfg.kernels)):
        y = conv2d(x, params[f"backbone.{i}.conv"], stride=s, padding=k // 2)
        y = _bn(params, buffers, f"backbone.{i}.bn", y, training, update_stats)
        if cfg.residual and s == 1 and y.shape == x.shape:
            y = y + x
        x = relu(y)
    return x


def head_forward(prefix: str, params, buffers, x: Tensor, training: bool = False,
                 update_stats: bool = True) -> Tensor:
    """1x1 conv -> BN -> ReLU -> 1x1 conv (+bias), applied per location."""
    y = conv2d(x, params[f"{prefix}.conv1"])
    y = relu(_bn(params, buffers, f"{prefix}.bn", y, training, update_stats))
    y = conv2d(y, params[f"{prefix}.conv2"])
    return y + reshape(params[f"{prefix}.bias2"], (1, -1, 1, 1))


def to_channels_last(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


def encode_dense(pair: EncoderPair, images, which: str = "online") -> np.ndarray:
    """Eval-mode dense features [N, G, G, C] as a plain array."""
    params = pair.online if which == "online" else pair.target
    buffers = pair.online_buffers if which == "online" else pair.target_buffers
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=pair.dtype))
    f = backbone_forward(pair.backbone, params, buffers, x, training=False)
    return np.ascontiguousarray(f.data.transpose(0, 2, 3, 1))


def project_and_predict(pair: EncoderPair, f_online: Tensor, f_target: Tensor, training: bool = True,
                        heads: tuple[str, str] = ("proj", "pred")) -> tuple[Tensor, Tensor]:
    """P1 = pred(proj(F_online)) and Z2 = proj_target(F_target), channels-last.

    Z2 is computed from target parameters only and carries no graph.
    """
    if f_online.shape[2:] != f_target.shape[2:]:
        raise ShapeError(f"online grid {f_online.shape[2:]} and target grid {f_target.shape[2:]} differ")
    proj, pred = heads
    z1 = head_forward(proj, pair.online, pair.online_buffers, f_online, training)
    p1 = head_forward(pred, pair.online, pair.online_buffers, z1, training)
    z2 = head_forward(proj, pair.target, pair.target_buffers, f_target.detach(), training, update_stats=False)
    return to_channels_last(p1), Tensor(z2.data.transpose(0, 2, 3, 1).copy())


def pooled(x: Tensor) -> Tensor:
    """Global average pool kept 4-d ([N, C, 1, 1]) so the 1x1 heads apply."""
    p = global_avg_pool(x)
    return reshape(p, (p.shape[0], p.shape[1], 1, 1))


# --------------------------------------------------------------------------
# EMA
# --------------------------------------------------------------------------

def ema_update(pair: EncoderPair, m: float) -> EncoderPair:
    """target <- m * target + (1 - m) * online, for parameters and BN statistics."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"EMA momentum must lie in [0, 1], got {m}")
    for name, t in pair.target.items():
        src = pair.online.get(name)
        if src is None or src.shape != t.shape:
            raise ConfigError(f"EMA structure mismatch at parameter {name!r}")
        t.data = m * t.data + (1 - m) * src.data
    for name, buf in pair.target_buffers.items():
        src = pair.online_buffers.get(name)
        if src is None or src.shape != buf.shape:
            raise ConfigError(f"EMA structure mismatch at buffer {name!r}")
        pair.target_buffers[name] = m * buf + (1 - m) * src
    return pair


def ema_schedule(step: int, total_steps: int, m0: float = 0.99) -> float:
    """Cosine ramp of the EMA momentum from ``m0`` at step 0 to 1 at the end."""
    if total_steps <= 0:
        return 1.0
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0
