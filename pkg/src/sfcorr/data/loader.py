"""Frame datasets, the on-disk video layout and the training batch stream.

Layout of a dataset directory::

    videoNNN/frameNNNNN.ppm
    videoNNN/labels/frameNNNNN.pgm     (optional, pixel value = class index)
    videoNNN/keypoints.txt             (optional, lines "frame_idx kp_idx x y")
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import ConfigError, DataError
from .augment import CROP_ONLY, AugmentationSpec, make_view_pair
from .netpbm import load_image, load_label, save_image, save_label


@dataclass
class VideoData:
    frames: np.ndarray                 # [T, 3, H, W]
    labels: np.ndarray | None = None   # [T, H, W] uint8
    keypoints: np.ndarray | None = None  # [T, K, 2]
    name: str = ""


def frame_name(t: int) -> str:
    return f"frame{t:05d}"


def write_keypoints(path, keypoints: np.ndarray) -> None:
    lines = []
    for t, kps in enumerate(keypoints):
        for k, (x, y) in enumerate(kps):
            lines.append(f"{t} {k} {x:.4f} {y:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_keypoints(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 'frame_idx kp_idx x y'")
        rows.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
    if not rows:
        return np.zeros((0, 0, 2))
    n_t = max(r[0] for r in rows) + 1
    n_k = max(r[1] for r in rows) + 1
    out = np.full((n_t, n_k, 2), np.nan)
    for t, k, x, y in rows:
        out[t, k] = (x, y)
    return out


def write_video_dir(path, frames, labels=None, keypoints=None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        save_image(path / f"{frame_name(t)}.ppm", frame)
    if labels is not None:
        (path / "labels").mkdir(exist_ok=True)
        for t, lab in enumerate(labels):
            save_label(path / "labels" / f"{frame_name(t)}.pgm", lab)
    if keypoints is not None:
        write_keypoints(path / "keypoints.txt", keypoints)
    return path


def read_video_dir(path) -> VideoData:
    path = Path(path)
    files = sorted(path.glob("frame*.ppm"))
    if not files:
        raise DataError(f"no frames found in {path}")
    frames = np.stack([load_image(f) for f in files])
    labels = None
    if (path / "labels").is_dir():
        lab_files = [path / "labels" / (f.stem + ".pgm") for f in files]
        if all(f.exists() for f in lab_files):
            labels = np.stack([load_label(f) for f in lab_files])
    kps = read_keypoints(path / "keypoints.txt") if (path / "keypoints.txt").exists() else None
    return VideoData(frames, labels, kps, path.name)


def list_video_dirs(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("video"))


class FrameDataset:
    """All frames of all videos, addressed by a flat index; temporal order is ignored."""

    def __init__(self, videos: list[np.ndarray]):
        self.videos = [np.asarray(v, dtype=np.float32) for v in videos]
        self.index = [(v, t) for v, frames in enumerate(self.videos) for t in range(len(frames))]
        if not self.index:
            raise DataError("dataset contains no frames")

    @classmethod
    def from_directory(cls, root) -> FrameDataset:
        dirs = list_video_dirs(root)
        if not dirs:
            raise DataError(f"no videoNNN directories under {root}")
        return cls([read_video_dir(d).frames for d in dirs])

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> np.ndarray:
        v, t = self.index[i]
        return self.videos[v][t]


@dataclass
class Batch:
    view1: np.ndarray      # [B, 3, S, S]
    view2: np.ndarray
    masks: np.ndarray      # [B, P, Q] uint8
    indices: list[int]
    geoms: list


def batch_iterator(dataset: FrameDataset, batch_size: int, seed: int, gamma1: float = 0.0,
                   gamma2: float = 1.0, aug: AugmentationSpec = CROP_ONLY, out_size: int = 64,
                   grid=(16, 16), r: float = 0.5) -> Iterator[Batch]:
    """Endless stream of view-pair batches, frames drawn uniformly with replacement.

    Index draws, crop geometry and photometric parameters use three
    independent streams derived from ``seed``.
    """
    if batch_size < 2:
        raise ConfigError(f"batch size must be at least 2 for batch norm, got {batch_size}")
    if len(dataset) == 0:
        raise DataError("empty dataset")
    idx_seq, geo_seq, photo_seq = np.random.SeedSequence(seed).spawn(3)
    idx_rng = np.random.default_rng(idx_seq)
    geo_rng = np.random.default_rng(geo_seq)
    photo_rng = np.random.default_rng(photo_seq)
    while True:
        picks = idx_rng.integers(0, len(dataset), size=batch_size)
        pairs = [make_view_pair(dataset[int(i)], gamma1, gamma2, aug, out_size, geo_rng, photo_rng, r, grid)
                 for i in picks]
        yield Batch(np.stack([p.view1 for p in pairs]), np.stack([p.view2 for p in pairs]),
                    np.stack([p.mask for p in pairs]), [int(i) for i in picks],
                    [(p.geom_a, p.geom_b) for p in pairs])
