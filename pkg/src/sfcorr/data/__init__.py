from .augment import CROP_ONLY, MOCO_V2, AugmentationSpec, ViewPair, make_view_pair, resize_crop
from .loader import (Batch, FrameDataset, VideoData, batch_iterator, list_video_dirs, read_keypoints,
                     read_video_dir, write_keypoints, write_video_dir)
from .netpbm import load_image, load_label, save_image, save_label
from .synthetic import SceneSpec, Sprite, SyntheticVideo, ValueNoise, generate_synthetic_video, make_videos, random_scene

__all__ = [
    "AugmentationSpec", "Batch", "CROP_ONLY", "FrameDataset", "MOCO_V2", "SceneSpec", "Sprite",
    "SyntheticVideo", "ValueNoise", "VideoData", "ViewPair", "batch_iterator", "generate_synthetic_video",
    "list_video_dirs", "load_image", "load_label", "make_videos", "make_view_pair", "random_scene",
    "read_keypoints", "read_video_dir", "resize_crop", "save_image", "save_label", "write_keypoints",
    "write_video_dir",
]
