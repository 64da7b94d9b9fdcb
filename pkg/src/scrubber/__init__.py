"""Perception for a floor-cleaning robot: people detection and tracking,
floor obstacle detection, dirt detection and floor-usage heatmaps."""

from .types import (
    BoundingBox3D,
    ColorFrame,
    DepthFrame,
    Detection,
    Intrinsics,
    LaserScan2D,
    Point3D,
    PointCloud3D,
    Pose2D,
    SequenceManifest,
    Source,
)
from .io import load_sequence, save_sequence
from .synth import generate_synthetic_scene

__version__ = "0.1.0"

__all__ = [
    "BoundingBox3D",
    "ColorFrame",
    "DepthFrame",
    "Detection",
    "Intrinsics",
    "LaserScan2D",
    "Point3D",
    "PointCloud3D",
    "Pose2D",
    "SequenceManifest",
    "Source",
    "generate_synthetic_scene",
    "load_sequence",
    "save_sequence",
]
