"""Plain-text run configuration.

INI-style sections of ``key = value`` lines. Every key has a typed default;
unknown sections or keys are rejected. :func:`serialize` emits every key in a
fixed order, so ``parse(serialize(c)) == c`` and the text doubles as the
input to the architecture hash stored in checkpoints.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data.augment import AugmentationSpec
from .encoder import BackboneConfig, HeadConfig
from .errors import ConfigError
from .propagation import PropagationConfig


@dataclass(frozen=True)
class BackboneSection:
    channels: tuple[int, ...] = (32, 64, 64, 64)
    strides: tuple[int, ...] = (2, 2, 1, 1)
    kernels: tuple[int, ...] = (3, 3, 3, 3)
    input_size: int = 64
    residual: bool = False


@dataclass(frozen=True)
class HeadsSection:
    hidden: int = 256
    out_dim: int = 64
    global_hidden: int = 256
    global_out_dim: int = 64


@dataclass(frozen=True)
class LossSection:
    r: float = 0.5
    tau: float = 0.07
    alpha: float = 1.0
    symmetrize: bool = False
    queue_size: int = 1024


@dataclass(frozen=True)
class OptimizerSection:
    lr: float = 0.001
    steps: int = 2000
    batch: int = 8
    ema_m0: float = 0.99
    log_every: int = 1


@dataclass(frozen=True)
class AugmentationSection:
    gamma1: float = 0.0
    gamma2: float = 1.0
    hflip: bool = False
    color_jitter: float = 0.0
    gaussian_blur: bool = False
    grayscale: bool = False
    grayscale_p: float = 1.0


@dataclass(frozen=True)
class PropagationSection:
    top_k: int = 10
    m: int = 20
    radius: int = 12
    tau: float = 0.07
    lam: float = 1.75


@dataclass(frozen=True)
class SeedsSection:
    init: int = 0
    data: int = 0


@dataclass(frozen=True)
class Config:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    heads: HeadsSection = field(default_factory=HeadsSection)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    propagation: PropagationSection = field(default_factory=PropagationSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    # typed views used by the rest of the package

    def backbone_config(self) -> BackboneConfig:
        b = self.backbone
        cfg = BackboneConfig(b.channels, b.strides, b.kernels, b.input_size, b.residual)
        cfg.validate()
        return cfg

    def head_config(self) -> HeadConfig:
        return HeadConfig(self.heads.hidden, self.heads.out_dim)

    def global_head_config(self) -> HeadConfig:
        return HeadConfig(self.heads.global_hidden, self.heads.global_out_dim)

    def augmentation_spec(self) -> AugmentationSpec:
        a = self.augmentation
        return AugmentationSpec(hflip=a.hflip, color_jitter=a.color_jitter, gaussian_blur=a.gaussian_blur,
                                grayscale=a.grayscale, grayscale_p=a.grayscale_p)

    def propagation_config(self) -> PropagationConfig:
        p = self.propagation
        cfg = PropagationConfig(top_k=p.top_k, context_m=p.m, radius=p.radius, tau=p.tau, lam=p.lam)
        cfg.validate()
        return cfg

    def replace(self, **sections) -> Config:
        return dataclasses.replace(self, **sections)


_SECTION_TYPES = {f.name: type(getattr(Config(), f.name)) for f in fields(Config)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def keys() -> list[tuple[str, str]]:
    """Every (section, key) pair, in serialization order."""
    out = []
    for sec, cls in _SECTION_TYPES.items():
        out += [(sec, f.name) for f in fields(cls)]
    return out


def default_value(section: str, key: str):
    return getattr(getattr(Config(), section), key)


def apply_overrides(cfg: Config, overrides: dict[tuple[str, str], str]) -> Config:
    """Return ``cfg`` with ``{(section, key): raw_text}`` values replaced."""
    updates: dict[str, dict] = {}
    for (sec, key), raw in overrides.items():
        if sec not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{sec}]")
        section = getattr(cfg, sec)
        if key not in {f.name for f in fields(section)}:
            raise ConfigError(f"unknown config key {sec}.{key}")
        value = raw if not isinstance(raw, str) else _parse_value(raw, getattr(section, key), f"{sec}.{key}")
        updates.setdefault(sec, {})[key] = value
    for sec, vals in updates.items():
        cfg = dataclasses.replace(cfg, **{sec: dataclasses.replace(getattr(cfg, sec), **vals)})
    return cfg


def parse(text: str, base: Config | None = None) -> Config:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    overrides = {}
    for sec in cp.sections():
        if sec not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, raw in cp.items(sec):
            overrides[(sec, key)] = raw
    return apply_overrides(base or Config(), overrides)


def _section_lines(cfg: Config, sec: str) -> list[str]:
    section = getattr(cfg, sec)
    return [f"[{sec}]"] + [f"{f.name} = {_format(getattr(section, f.name))}" for f in fields(section)] + [""]


def serialize(cfg: Config) -> str:
    return "\n".join(line for sec in _SECTION_TYPES for line in _section_lines(cfg, sec))


def load(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text)


def save(cfg: Config, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(serialize(cfg))
    tmp.replace(path)
    return path


def architecture_hash(cfg: Config) -> int:
    """64-bit hash of the sections that determine parameter shapes."""
    text = "\n".join(_section_lines(cfg, "backbone") + _section_lines(cfg, "heads"))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
