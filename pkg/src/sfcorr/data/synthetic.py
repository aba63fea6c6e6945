"""Procedural videos of textured sprites over value-noise backgrounds.

Masks and keypoints are computed from sprite geometry at pixel centers,
never from rendered colors, so they are exact by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


class ValueNoise:
    """Multi-octave value noise on a 256-periodic lattice, evaluated at float coordinates."""

    def __init__(self, seed, octaves: int = 3, period: float = 16.0, channels: int = 3,
                 mean=None, contrast: float = 1.0):
        rng = np.random.default_rng(seed)
        self.lattices = rng.random((octaves, 256, 256, channels))
        self.period = period
        self.mean = np.full(channels, 0.5) if mean is None else np.asarray(mean, dtype=np.float64)
        self.contrast = contrast

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape + (self.lattices.shape[-1],))
        total = 0.0
        for o, lat in enumerate(self.lattices):
            scale = self.period / 2 ** o
            u, v = x / scale, y / scale
            iu, iv = np.floor(u), np.floor(v)
            fu, fv = u - iu, v - iv
            fu = fu * fu * (3 - 2 * fu)
            fv = fv * fv * (3 - 2 * fv)
            i0 = iu.astype(np.int64) % 256
            j0 = iv.astype(np.int64) % 256
            i1, j1 = (i0 + 1) % 256, (j0 + 1) % 256
            top = lat[j0, i0] * (1 - fu)[..., None] + lat[j0, i1] * fu[..., None]
            bot = lat[j1, i0] * (1 - fu)[..., None] + lat[j1, i1] * fu[..., None]
            amp = 0.5 ** o
            out += amp * (top * (1 - fv)[..., None] + bot * fv[..., None])
            total += amp
        out = out / total - 0.5
        return np.clip(self.mean + self.contrast * out, 0.0, 1.0)


@dataclass
class Sprite:
    kind: str                      # "disc", "polygon" or "rect"
    center: tuple[float, float]    # (x, y) at frame 0, px
    size: float                    # radius (disc/polygon) or half side (rect), px
    velocity: tuple[float, float] = (0.0, 0.0)
    scale_rate: float = 0.0        # size(t) = size * (1 + scale_rate * t)
    sides: int = 5
    rotation: float = 0.0
    texture_seed: int = 0
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    contrast: float = 1.0
    period: float = 6.0

    def size_at(self, t: int) -> float:
        return self.size * (1.0 + self.scale_rate * t)

    def center_at(self, t: int) -> tuple[float, float]:
        return self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t

    def vertices(self, t: int) -> np.ndarray:
        cx, cy = self.center_at(t)
        r = self.size_at(t)
        ang = self.rotation + 2 * np.pi * np.arange(self.sides) / self.sides
        return np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1)

    def inside(self, px: np.ndarray, py: np.ndarray, t: int) -> np.ndarray:
        cx, cy = self.center_at(t)
        s = self.size_at(t)
        if self.kind == "disc":
            dx, dy = px - cx, py - cy
            return dx * dx + dy * dy <= s * s
        if self.kind == "rect":
            return (px >= cx - s) & (px < cx + s) & (py >= cy - s) & (py < cy + s)
        if self.kind == "polygon":
            v = self.vertices(t)
            ok = np.ones(px.shape, dtype=bool)
            for k in range(len(v)):
                (x1, y1), (x2, y2) = v[k], v[(k + 1) % len(v)]
                ok &= (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1) >= 0
            return ok
        raise ConfigError(f"unknown sprite kind {self.kind!r}")

    def keypoints(self, t: int) -> np.ndarray:
        """Centroid, leftmost, rightmost, topmost, bottommost points, as (x, y)."""
        cx, cy = self.center_at(t)
        s = self.size_at(t)
        if self.kind == "polygon":
            v = self.vertices(t)
            ext = [v[np.argmin(v[:, 0])], v[np.argmax(v[:, 0])], v[np.argmin(v[:, 1])], v[np.argmax(v[:, 1])]]
            return np.array([[cx, cy]] + [list(p) for p in ext])
        return np.array([[cx, cy], [cx - s, cy], [cx + s, cy], [cx, cy - s], [cx, cy + s]])

    def extent(self, t: int) -> float:
        return self.size_at(t)


@dataclass
class SceneSpec:
    frame_size: tuple[int, int] = (64, 64)   # (H, W)
    n_frames: int = 24
    sprites: list[Sprite] = field(default_factory=list)
    background_seed: int = 0
    background_period: float = 12.0
    background_contrast: float = 1.0
    camera_velocity: tuple[float, float] = (0.0, 0.0)
    noise_std: float = 0.0


@dataclass
class SyntheticVideo:
    frames: np.ndarray      # [T, 3, H, W] float32 in [0, 1]
    masks: np.ndarray       # [T, H, W] uint8, 0 = background, k = sprite k
    keypoints: np.ndarray   # [T, n_sprites * 5, 2] (x, y) in px
    spec: SceneSpec

    @property
    def n_classes(self) -> int:
        return len(self.spec.sprites) + 1


def generate_synthetic_video(spec: SceneSpec, seed: int = 0) -> SyntheticVideo:
    """Render ``spec``; ``seed`` drives only the per-frame sensor noise."""
    H, W = spec.frame_size
    for k, s in enumerate(spec.sprites):
        if 2 * max(s.size_at(0), s.size_at(spec.n_frames - 1)) > min(H, W):
            raise ConfigError(f"sprite {k} is larger than the frame")
    rng = np.random.default_rng(seed)
    bg = ValueNoise(spec.background_seed, period=spec.background_period, contrast=spec.background_contrast)
    textures = [ValueNoise(s.texture_seed, octaves=2, period=s.period, mean=s.color, contrast=s.contrast)
                for s in spec.sprites]
    py, px = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    frames = np.empty((spec.n_frames, 3, H, W), dtype=np.float32)
    masks = np.zeros((spec.n_frames, H, W), dtype=np.uint8)
    kps = np.zeros((spec.n_frames, 5 * len(spec.sprites), 2))
    for t in range(spec.n_frames):
        camx, camy = spec.camera_velocity[0] * t, spec.camera_velocity[1] * t
        wx, wy = px + camx, py + camy
        img = bg(wx, wy)
        for k, (s, tex) in enumerate(zip(spec.sprites, textures)):
            inside = s.inside(wx, wy, t)
            cx, cy = s.center_at(t)
            scale = s.size_at(t) / s.size
            img[inside] = tex((wx[inside] - cx) / scale, (wy[inside] - cy) / scale)
            masks[t][inside] = k + 1
            kp = s.keypoints(t)
            kp[:, 0] -= camx
            kp[:, 1] -= camy
            kps[t, 5 * k:5 * k + 5] = kp
        if spec.noise_std > 0:
            img = np.clip(img + rng.normal(0, spec.noise_std, img.shape), 0, 1)
        frames[t] = img.transpose(2, 0, 1)
    return SyntheticVideo(frames, masks, kps, spec)


def random_scene(rng: np.random.Generator, frame_size=(64, 64), n_frames: int = 24, n_sprites=(1, 3),
                 max_speed: float = 1.5, size_range=(7.0, 14.0), scale_rate: float = 0.0,
                 noise_std: float = 0.02) -> SceneSpec:
    """A scene whose sprites stay fully inside the frame for every frame."""
    H, W = frame_size
    count = int(rng.integers(n_sprites[0], n_sprites[1] + 1))
    sprites = []
    for _ in range(count):
        size = float(rng.uniform(*size_range))
        rate = float(rng.uniform(-scale_rate, scale_rate)) if scale_rate else 0.0
        grow = max(1.0, 1.0 + rate * (n_frames - 1))
        reach = size * grow
        if 2 * reach >= min(H, W):
            reach = min(H, W) / 2 - 1
            size = reach / grow
        speed = float(rng.uniform(0, max_speed))
        ang = float(rng.uniform(0, 2 * np.pi))
        vx, vy = speed * math.cos(ang), speed * math.sin(ang)
        span_x, span_y = abs(vx) * (n_frames - 1), abs(vy) * (n_frames - 1)
        room_x, room_y = W - 2 * reach, H - 2 * reach
        if span_x > room_x:
            vx *= room_x / span_x
            span_x = room_x
        if span_y > room_y:
            vy *= room_y / span_y
            span_y = room_y
        x_lo = reach + (span_x if vx < 0 else 0)
        y_lo = reach + (span_y if vy < 0 else 0)
        cx = float(rng.uniform(x_lo, x_lo + room_x - span_x))
        cy = float(rng.uniform(y_lo, y_lo + room_y - span_y))
        sprites.append(Sprite(
            kind=str(rng.choice(["disc", "polygon", "rect"])),
            center=(cx, cy), size=size, velocity=(vx, vy), scale_rate=rate,
            sides=int(rng.integers(3, 7)), rotation=float(rng.uniform(0, 2 * np.pi)),
            texture_seed=int(rng.integers(2**31)), color=tuple(rng.uniform(0.15, 0.85, 3)),
            contrast=float(rng.uniform(0.8, 1.6)), period=float(rng.uniform(3.0, 8.0)),
        ))
    return SceneSpec(frame_size=tuple(frame_size), n_frames=n_frames, sprites=sprites,
                     background_seed=int(rng.integers(2**31)),
                     background_period=float(rng.uniform(6.0, 16.0)), noise_std=noise_std)


def make_videos(n_videos: int, seed: int, **scene_kwargs) -> list[SyntheticVideo]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_videos):
        spec = random_scene(rng, **scene_kwargs)
        out.append(generate_synthetic_video(spec, seed=int(rng.integers(2**31))))
    return out
