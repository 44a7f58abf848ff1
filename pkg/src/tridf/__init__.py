"""Hybrid triplane / density-field radiance fields for few-view scenes."""

from .camera import Camera, Extrinsics, Intrinsics
from .field import FieldConfig, TriDF
from .metrics import psnr, ssim
from .scene import PointCloud, SceneDataset, load_point_cloud, load_scene, save_scene, synth_scene
from .train import TrainConfig, train

__all__ = [
    "Camera", "Extrinsics", "Intrinsics", "FieldConfig", "TriDF", "psnr", "ssim",
    "PointCloud", "SceneDataset", "load_point_cloud", "load_scene", "save_scene",
    "synth_scene", "TrainConfig", "train",
]
__version__ = "0.1.0"
