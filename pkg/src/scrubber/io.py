"""Sequence directory reader and writer.

Layout::

    manifest.json        calibration, sensor heights, ordered frame index
    clouds/NNNNNN.bin    b"FPC1", u32 count, count * 4 little-endian f32 (x, y, z, intensity)
    depth/NNNNNN.png     16-bit grayscale, millimeters, 0 = invalid
    rgb/NNNNNN.png       8-bit RGB
    scan/NNNNNN.csv      one row: angle_min, angle_increment, ranges...
    poses.csv            timestamp,x,y,theta
    groundtruth.json     optional, written by the synthetic generator
"""

from __future__ import annotations

import bisect
import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .types import (
    ColorFrame,
    DepthFrame,
    Intrinsics,
    LaserScan2D,
    PointCloud3D,
    Pose2D,
    SequenceManifest,
    wrap_angle,
)

CLOUD_MAGIC = b"FPC1"
KIND_DIRS = {"cloud": "clouds", "depth": "depth", "rgb": "rgb", "scan": "scan"}
KIND_EXT = {"cloud": ".bin", "depth": ".png", "rgb": ".png", "scan": ".csv"}


class SequenceError(Exception):
    """Raised when a sequence directory cannot be read back or written."""


@dataclass(frozen=True)
class Frame:
    sensor: str
    timestamp: float
    data: PointCloud3D | DepthFrame | ColorFrame | LaserScan2D

    @property
    def kind(self) -> str:
        return _kind_of(self.data)


def _kind_of(data) -> str:
    if isinstance(data, PointCloud3D):
        return "cloud"
    if isinstance(data, DepthFrame):
        return "depth"
    if isinstance(data, ColorFrame):
        return "rgb"
    if isinstance(data, LaserScan2D):
        return "scan"
    raise SequenceError(f"unsupported frame payload {type(data).__name__}")


# -- per-file codecs ---------------------------------------------------------


def write_cloud(path: Path, cloud: PointCloud3D) -> None:
    pts = np.asarray(cloud.points, dtype="<f4")
    if not np.all(np.isfinite(pts)):
        raise SequenceError(f"{path}: cloud contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<I", len(pts)))
        fh.write(pts.tobytes())


def read_cloud(path: Path, timestamp: float = 0.0, frame_id: str = "sensor") -> PointCloud3D:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise SequenceError(f"{path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != CLOUD_MAGIC:
        raise SequenceError(f"{path}: bad cloud header")
    (count,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + 16 * count:
        raise SequenceError(f"{path}: expected {count} records, file size {len(raw)}")
    pts = np.frombuffer(raw[8:], dtype="<f4").reshape(count, 4)
    try:
        return PointCloud3D(pts, timestamp, frame_id)
    except ValueError as exc:
        raise SequenceError(f"{path}: {exc}") from exc


def depth_to_mm(depth: np.ndarray) -> np.ndarray:
    mm = np.rint(np.asarray(depth, dtype=np.float64) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise SequenceError("depth exceeds 65.535 m, not representable in 16-bit millimeters")
    return mm.astype(np.uint16)


def mm_to_depth(mm: np.ndarray) -> np.ndarray:
    return np.asarray(mm, dtype=np.float64) / 1000.0


def write_depth(path: Path, frame: DepthFrame) -> None:
    Image.fromarray(depth_to_mm(frame.depth)).save(path)


def read_depth(path: Path, intrinsics: Intrinsics, timestamp: float = 0.0) -> DepthFrame:
    try:
        with Image.open(path) as im:
            mm = np.array(im)
    except OSError as exc:
        raise SequenceError(f"{path}: {exc}") from exc
    if mm.ndim != 2:
        raise SequenceError(f"{path}: depth image must be single-channel")
    return DepthFrame(mm_to_depth(mm.astype(np.uint16)), intrinsics, timestamp)


def write_rgb(path: Path, frame: ColorFrame) -> None:
    Image.fromarray(np.asarray(frame.rgb, dtype=np.uint8), mode="RGB").save(path)


def read_rgb(path: Path, timestamp: float = 0.0) -> ColorFrame:
    try:
        with Image.open(path) as im:
            rgb = np.array(im.convert("RGB"))
    except OSError as exc:
        raise SequenceError(f"{path}: {exc}") from exc
    return ColorFrame(rgb, timestamp)


def write_scan(path: Path, scan: LaserScan2D) -> None:
    row = [scan.angle_min, scan.angle_increment, *scan.ranges.tolist()]
    path.write_text(",".join(repr(float(v)) for v in row) + "\n")


def read_scan(path: Path, range_max: float = 30.0, timestamp: float = 0.0) -> LaserScan2D:
    try:
        values = [float(v) for v in Path(path).read_text().strip().split(",")]
        return LaserScan2D(values[0], values[1], np.array(values[2:]), range_max, timestamp)
    except (OSError, ValueError, IndexError) as exc:
        raise SequenceError(f"{path}: malformed scan ({exc})") from exc


# -- sequences ---------------------------------------------------------------


class Sequence:
    """A loaded sequence directory. Frame payloads are read lazily."""

    def __init__(self, root: Path, manifest: SequenceManifest, poses: list[Pose2D], ground_truth: dict | None):
        self.root = root
        self.manifest = manifest
        self.poses = poses
        self.ground_truth = ground_truth
        self._pose_t = [p.timestamp for p in poses]

    def __len__(self) -> int:
        return len(self.manifest.frames)

    def frames(self, sensors: Iterable[str] | None = None) -> Iterator[Frame]:
        wanted = None if sensors is None else set(sensors)
        for rec in self.manifest.frames:
            if wanted is not None and rec["sensor"] not in wanted:
                continue
            yield self._read(rec)

    def _read(self, rec: dict) -> Frame:
        path = self.root / rec["file"]
        t = rec["timestamp"]
        kind = rec["kind"]
        if kind == "cloud":
            data = read_cloud(path, t, rec.get("frame_id", "sensor"))
        elif kind == "depth":
            data = read_depth(path, Intrinsics(*rec["intrinsics"]), t)
        elif kind == "rgb":
            data = read_rgb(path, t)
        elif kind == "scan":
            data = read_scan(path, rec.get("range_max", self.manifest.range_max), t)
        else:
            raise SequenceError(f"{path}: unknown frame kind {kind!r}")
        return Frame(rec["sensor"], t, data)

    def pose_at(self, t: float) -> Pose2D | None:
        """Linearly interpolated robot pose; clamped outside the pose stream."""
        if not self.poses:
            return None
        i = bisect.bisect_left(self._pose_t, t)
        if i <= 0:
            p = self.poses[0]
        elif i >= len(self.poses):
            p = self.poses[-1]
        else:
            a, b = self.poses[i - 1], self.poses[i]
            if t == b.timestamp or b.timestamp == a.timestamp:
                p = b
            else:
                s = (t - a.timestamp) / (b.timestamp - a.timestamp)
                dth = wrap_angle(b.theta - a.theta)
                return Pose2D(a.x + s * (b.x - a.x), a.y + s * (b.y - a.y), a.theta + s * dth, t)
        return Pose2D(p.x, p.y, p.theta, t)


def _parse_manifest(root: Path) -> SequenceManifest:
    path = root / "manifest.json"
    if not path.is_file():
        raise SequenceError(f"{path}: manifest not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SequenceError(f"{path}: invalid JSON ({exc})") from exc
    extr = {}
    for name, m in raw.get("extrinsics", {}).items():
        T = np.asarray(m, dtype=np.float64)
        if T.shape != (4, 4) or abs(np.linalg.det(T)) < 1e-12:
            raise SequenceError(f"{path}: extrinsic for {name!r} is not an invertible 4x4 matrix")
        extr[name] = T
    man = SequenceManifest(extrinsics=extr, frames=list(raw.get("frames", [])), range_max=raw.get("range_max", 30.0))
    man.heights.update(raw.get("heights", {}))
    return man


def load_sequence(path) -> Sequence:
    root = Path(path)
    manifest = _parse_manifest(root)
    last_t = -math.inf
    for i, rec in enumerate(manifest.frames):
        missing = {"sensor", "kind", "timestamp", "file"} - set(rec)
        if missing:
            raise SequenceError(f"manifest frame {i}: missing fields {sorted(missing)}")
        f = root / rec["file"]
        if not f.is_file():
            raise SequenceError(f"{f}: referenced frame file does not exist")
        if rec["timestamp"] < last_t:
            raise SequenceError(f"{f}: timestamp {rec['timestamp']} regresses from {last_t}")
        last_t = rec["timestamp"]
    poses = []
    pose_file = root / "poses.csv"
    if pose_file.is_file():
        with open(pose_file, newline="") as fh:
            for row in csv.DictReader(fh):
                try:
                    poses.append(Pose2D(float(row["x"]), float(row["y"]), float(row["theta"]), float(row["timestamp"])))
                except (KeyError, ValueError) as exc:
                    raise SequenceError(f"{pose_file}: malformed row {row}") from exc
        if any(b.timestamp < a.timestamp for a, b in zip(poses, poses[1:])):
            raise SequenceError(f"{pose_file}: pose timestamps regress")
    gt_file = root / "groundtruth.json"
    gt = json.loads(gt_file.read_text()) if gt_file.is_file() else None
    return Sequence(root, manifest, poses, gt)


def save_sequence(
    frames: Iterable[Frame],
    path,
    manifest: SequenceManifest | None = None,
    poses: Iterable[Pose2D] = (),
    ground_truth: dict | None = None,
) -> Path:
    root = Path(path)
    manifest = manifest or SequenceManifest()
    try:
        root.mkdir(parents=True, exist_ok=True)
        for d in KIND_DIRS.values():
            (root / d).mkdir(exist_ok=True)
    except OSError as exc:
        raise SequenceError(f"{root}: cannot create sequence directory ({exc})") from exc

    counters = dict.fromkeys(KIND_DIRS, 0)
    records = []
    last_t = -math.inf
    for fr in frames:
        if fr.timestamp < last_t:
            raise SequenceError(f"frame at t={fr.timestamp} is out of order (previous {last_t})")
        last_t = fr.timestamp
        kind = fr.kind
        rel = f"{KIND_DIRS[kind]}/{counters[kind]:06d}{KIND_EXT[kind]}"
        counters[kind] += 1
        rec = {"sensor": fr.sensor, "kind": kind, "timestamp": float(fr.timestamp), "file": rel}
        target = root / rel
        try:
            if kind == "cloud":
                write_cloud(target, fr.data)
                rec["frame_id"] = fr.data.frame_id
            elif kind == "depth":
                write_depth(target, fr.data)
                k = fr.data.intrinsics
                rec["intrinsics"] = [k.fx, k.fy, k.cx, k.cy]
            elif kind == "rgb":
                write_rgb(target, fr.data)
            else:
                write_scan(target, fr.data)
                rec["range_max"] = fr.data.range_max
        except OSError as exc:
            raise SequenceError(f"{target}: write failed ({exc})") from exc
        records.append(rec)

    doc = {
        "version": 1,
        "extrinsics": {k: np.asarray(v).tolist() for k, v in manifest.extrinsics.items()},
        "heights": manifest.heights,
        "range_max": manifest.range_max,
        "frames": records,
    }
    (root / "manifest.json").write_text(json.dumps(doc, indent=1))
    with open(root / "poses.csv", "w", newline="") as fh:
        fh.write("timestamp,x,y,theta\n")
        for p in poses:
            fh.write(f"{p.timestamp!r},{p.x!r},{p.y!r},{p.theta!r}\n")
    if ground_truth is not None:
        (root / "groundtruth.json").write_text(json.dumps(ground_truth, indent=1, sort_keys=True))
    return root
