"""Value types shared by every stage of the perception pipeline.

Arrays held by these types are made read-only at construction so instances can
be passed between threads without copying.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

# Mounting heights above the floor, meters.
LIDAR3D_HEIGHT = 0.8
FRONT_RGBD_HEIGHT = 0.55
FLOOR_RGBD_HEIGHT = 0.72
LASER2D_HEIGHT = 0.119


class Source(str, Enum):
    LIDAR3D = "lidar3d"
    RGBD_UPPER_BODY = "rgbd_upper_body"
    RGBD_LEGS = "rgbd_legs"
    LASER_LEGS = "laser_legs"


SOURCE_ORDER = {s: i for i, s in enumerate(Source)}


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    t = math.atan2(math.sin(theta), math.cos(theta))
    return math.pi if t == -math.pi else t


@dataclass(frozen=True)
class Point3D:
    x: float
    y: float
    z: float
    intensity: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError("point coordinates must be finite")
        if not 0.0 <= self.intensity <= 255.0:
            raise ValueError(f"intensity {self.intensity} outside [0, 255]")


@dataclass(frozen=True, eq=False)
class PointCloud3D:
    """N points stored as an (N, 4) float32 array of x, y, z, intensity.

    ``rgb`` is an optional (N, 3) uint8 array for registered RGB-D clouds.
    """

    points: np.ndarray
    timestamp: float = 0.0
    frame_id: str = "sensor"
    rgb: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = np.zeros((0, 4), dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise ValueError(f"points must be (N, 3) or (N, 4), got {pts.shape}")
        if pts.shape[1] == 3:
            pts = np.hstack([pts, np.zeros((len(pts), 1), np.float32)])
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        if len(pts) and (pts[:, 3].min() < 0 or pts[:, 3].max() > 255):
            raise ValueError("intensity outside [0, 255]")
        if self.frame_id not in ("sensor", "world", "base"):
            raise ValueError(f"unknown frame_id {self.frame_id!r}")
        object.__setattr__(self, "points", _frozen(pts, np.float32))
        if self.rgb is not None:
            rgb = np.asarray(self.rgb)
            if rgb.shape != (len(pts), 3):
                raise ValueError("rgb must be (N, 3) matching points")
            object.__setattr__(self, "rgb", _frozen(rgb, np.uint8))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3].astype(np.float64)

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3].astype(np.float64)

    def subset(self, idx) -> "PointCloud3D":
        idx = np.asarray(idx)
        return PointCloud3D(
            self.points[idx],
            self.timestamp,
            self.frame_id,
            None if self.rgb is None else self.rgb[idx],
        )

    def __eq__(self, other):
        if not isinstance(other, PointCloud3D):
            return NotImplemented
        same_rgb = (self.rgb is None and other.rgb is None) or (
            self.rgb is not None and other.rgb is not None and np.array_equal(self.rgb, other.rgb)
        )
        return (
            self.timestamp == other.timestamp
            and self.frame_id == other.frame_id
            and np.array_equal(self.points, other.points)
            and same_rgb
        )


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float
    timestamp: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.theta, self.timestamp)):
            raise ValueError("pose must be finite")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 base-to-world transform."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        T = np.eye(4)
        T[:2, :2] = [[c, -s], [s, c]]
        T[0, 3], T[1, 3] = self.x, self.y
        return T


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.cx <= 0 or self.cy <= 0:
            raise ValueError("intrinsics must be positive")


@dataclass(frozen=True, eq=False)
class DepthFrame:
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    intrinsics: Intrinsics
    timestamp: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth must be 2-D")
        if not np.all(np.isfinite(d)) or d.min(initial=0.0) < 0:
            raise ValueError("depth values must be finite and >= 0")
        object.__setattr__(self, "depth", _frozen(d))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def backproject(self) -> tuple[np.ndarray, np.ndarray]:
        """Camera-frame points (x right, y down, z forward) of valid pixels.

        Returns the (M, 3) points and the (H, W) validity mask.
        """
        k = self.intrinsics
        valid = self.depth > 0
        v, u = np.nonzero(valid)
        z = self.depth[valid]
        x = (u - k.cx) * z / k.fx
        y = (v - k.cy) * z / k.fy
        return np.column_stack([x, y, z]), valid

    def __eq__(self, other):
        if not isinstance(other, DepthFrame):
            return NotImplemented
        return (
            self.intrinsics == other.intrinsics
            and self.timestamp == other.timestamp
            and np.array_equal(self.depth, other.depth)
        )


@dataclass(frozen=True, eq=False)
class ColorFrame:
    rgb: np.ndarray  # (H, W, 3) uint8
    timestamp: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.rgb)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError("rgb must be (H, W, 3)")
        object.__setattr__(self, "rgb", _frozen(a, np.uint8))

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ColorFrame):
            return NotImplemented
        return self.timestamp == other.timestamp and np.array_equal(self.rgb, other.rgb)


@dataclass(frozen=True, eq=False)
class LaserScan2D:
    angle_min: float
    angle_increment: float
    ranges: np.ndarray
    range_max: float = 30.0
    timestamp: float = 0.0

    def __post_init__(self):
        r = np.asarray(self.ranges, dtype=np.float64)
        if r.ndim != 1 or len(r) < 2:
            raise ValueError("a scan needs at least 2 ranges")
        if self.angle_increment <= 0:
            raise ValueError("angle_increment must be positive")
        object.__setattr__(self, "ranges", _frozen(r))

    @property
    def angles(self) -> np.ndarray:
        return self.angle_min + self.angle_increment * np.arange(len(self.ranges))

    def valid(self) -> np.ndarray:
        r = self.ranges
        return np.isfinite(r) & (r > 0) & (r < self.range_max)

    def points(self) -> np.ndarray:
        a = self.angles
        return np.column_stack([self.ranges * np.cos(a), self.ranges * np.sin(a)])

    def __eq__(self, other):
        if not isinstance(other, LaserScan2D):
            return NotImplemented
        return (
            self.angle_min == other.angle_min
            and self.angle_increment == other.angle_increment
            and self.range_max == other.range_max
            and self.timestamp == other.timestamp
            and np.array_equal(self.ranges, other.ranges)
        )


@dataclass(frozen=True)
class BoundingBox3D:
    """Axis-aligned box. ``extents`` is (width, depth, height) along x, y, z."""

    center: tuple[float, float, float]
    extents: tuple[float, float, float]

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        e = tuple(float(v) for v in self.extents)
        if len(c) != 3 or len(e) != 3:
            raise ValueError("center and extents must be 3-vectors")
        # Degenerate (zero) extents are allowed for clusters of coplanar points.
        if any(v < 0 or not math.isfinite(v) for v in e):
            raise ValueError(f"extents must be finite and non-negative: {e}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "extents", e)

    @classmethod
    def from_points(cls, xyz: np.ndarray) -> "BoundingBox3D":
        lo, hi = xyz.min(axis=0), xyz.max(axis=0)
        return cls(tuple((lo + hi) / 2), tuple(hi - lo))

    @property
    def min_corner(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.extents) / 2

    @property
    def max_corner(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.extents) / 2

    @property
    def volume(self) -> float:
        w, d, h = self.extents
        return w * d * h

    def to_dict(self) -> dict:
        return {"center": list(self.center), "extents": list(self.extents)}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox3D":
        return cls(tuple(d["center"]), tuple(d["extents"]))


@dataclass(frozen=True, eq=False)
class Detection:
    """A person hypothesis on the ground plane, in the world frame."""

    position: np.ndarray
    covariance: np.ndarray
    source: Source
    confidence: float = 1.0
    timestamp: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(2)
        c = np.asarray(self.covariance, dtype=np.float64).reshape(2, 2)
        if not np.allclose(c, c.T):
            raise ValueError("detection covariance must be symmetric")
        if np.linalg.eigvalsh(c).min() <= 0:
            raise ValueError("detection covariance must be positive definite")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        object.__setattr__(self, "position", _frozen(p))
        object.__setattr__(self, "covariance", _frozen(c))
        object.__setattr__(self, "source", Source(self.source))

    def sort_key(self):
        return (SOURCE_ORDER[self.source], float(self.position[0]), float(self.position[1]))

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "source": self.source.value,
            "position": self.position.tolist(),
            "covariance": self.covariance.tolist(),
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(d["position"], d["covariance"], Source(d["source"]), d["confidence"], d["timestamp"])


def isotropic(sigma: float) -> np.ndarray:
    return np.eye(2) * sigma**2


@dataclass
class SequenceManifest:
    """Sensor calibration plus the index of frame files of one recording."""

    extrinsics: dict[str, np.ndarray] = field(default_factory=dict)
    heights: dict[str, float] = field(
        default_factory=lambda: {
            "lidar3d": LIDAR3D_HEIGHT,
            "front_rgbd": FRONT_RGBD_HEIGHT,
            "floor_rgbd": FLOOR_RGBD_HEIGHT,
            "laser2d": LASER2D_HEIGHT,
        }
    )
    frames: list[dict] = field(default_factory=list)
    range_max: float = 30.0

    def extrinsic(self, sensor: str) -> np.ndarray:
        """Sensor-to-base transform; identity when the sensor is uncalibrated."""
        return np.asarray(self.extrinsics.get(sensor, np.eye(4)), dtype=np.float64)


def transform_points(T: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    return xyz @ T[:3, :3].T + T[:3, 3]


def sensor_to_world(pose: Pose2D | None, extrinsic: np.ndarray | None) -> np.ndarray:
    T = np.eye(4) if extrinsic is None else np.asarray(extrinsic, dtype=np.float64)
    if pose is not None:
        T = pose.matrix() @ T
    return T


def mounting_extrinsic(height: float, x: float = 0.0, y: float = 0.0, yaw: float = 0.0) -> np.ndarray:
    """Sensor-to-base transform for a z-up sensor mounted at ``height``."""
    c, s = math.cos(yaw), math.sin(yaw)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    T[:3, 3] = [x, y, height]
    return T


def camera_extrinsic(height: float, pitch: float, x: float = 0.0) -> np.ndarray:
    """Camera-to-base transform for an optical-frame camera (x right, y down,
    z forward) looking along base +x and tilted down by ``pitch`` radians."""
    # optical -> level body frame (x fwd, y left, z up)
    R0 = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    c, s = math.cos(pitch), math.sin(pitch)
    Ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    T = np.eye(4)
    T[:3, :3] = Ry @ R0
    T[:3, 3] = [x, 0.0, height]
    return T
