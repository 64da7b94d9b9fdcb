"""Synthetic scenes with exact ground truth.

Every sensor is simulated by ray casting against the same analytic shapes:
vertical cylinders (people, bins), axis-aligned boxes (walls, crates) and the
floor. People appear to the 3D lidar as 0.5 x 0.5 x 1.7 m cylinders and to the
2D laser as two leg cylinders. The floor camera renders a textured floor with
dirt blobs and protruding boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .io import Frame, save_sequence
from .objects import NoiseModel
from .types import (
    FLOOR_RGBD_HEIGHT,
    LASER2D_HEIGHT,
    LIDAR3D_HEIGHT,
    BoundingBox3D,
    ColorFrame,
    DepthFrame,
    Detection,
    Intrinsics,
    LaserScan2D,
    PointCloud3D,
    Pose2D,
    SequenceManifest,
    Source,
    camera_extrinsic,
    isotropic,
    mounting_extrinsic,
    sensor_to_world,
)

HUMAN_RADIUS = 0.25
HUMAN_HEIGHT = 1.7
LEG_RADIUS = 0.06
LEG_SPACING = 0.3
LEG_HEIGHT = 0.8
FLOOR_PITCH = math.radians(40.0)
FLOOR_CAMERA_X = 0.3

# ---------------------------------------------------------------- shapes


@dataclass(frozen=True)
class Cylinder:
    cx: float
    cy: float
    radius: float
    z0: float
    z1: float
    intensity: float = 30.0
    color: tuple = (60, 60, 140)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    intensity: float = 120.0
    color: tuple = (200, 40, 40)

    @classmethod
    def at(cls, x, y, w, d, h, z0=0.0, **kw) -> "Box":
        return cls((x - w / 2, y - d / 2, z0), (x + w / 2, y + d / 2, z0 + h), **kw)

    @property
    def bbox(self) -> BoundingBox3D:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return BoundingBox3D(tuple((lo + hi) / 2), tuple(hi - lo))


def _hit_cylinder(o, d, c: Cylinder) -> np.ndarray:
    ox, oy = o[0] - c.cx, o[1] - c.cy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    cc = ox * ox + oy * oy - c.radius**2
    disc = b * b - 4 * a * cc
    t = np.full(len(d), np.inf)
    ok = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-b - sq) / (2 * a)
    z = o[2] + t1 * d[:, 2]
    ok &= (t1 > 1e-9) & (z >= c.z0) & (z <= c.z1)
    t[ok] = t1[ok]
    return t


def _hit_box(o, d, b: Box) -> np.ndarray:
    lo, hi = np.asarray(b.lo), np.asarray(b.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    ok = (tmax >= tmin) & (tmin > 1e-9)
    return np.where(ok, tmin, np.inf)


def _hit_floor(o, d, sag: float = 0.0, sag_center: float = 0.0, sag_span: float = 2.0) -> np.ndarray:
    """Floor z = sag * ((x - sag_center) / (span / 2))^2, or z = 0 without sag."""
    if sag == 0.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[2] / d[:, 2]
        return np.where((d[:, 2] < 0) & (t > 0), t, np.inf)
    k = sag / (sag_span / 2) ** 2
    px = o[0] - sag_center
    # k (px + t dx)^2 - (oz + t dz) = 0
    A = k * d[:, 0] ** 2
    B = 2 * k * px * d[:, 0] - d[:, 2]
    C = k * px * px - o[2]
    t = np.full(len(d), np.inf)
    lin = np.abs(A) < 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lin = -C / B
        disc = B * B - 4 * A * C
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        r1 = (-B - sq) / (2 * A)
        r2 = (-B + sq) / (2 * A)
    roots = np.stack([np.where(lin, t_lin, r1), np.where(lin, np.nan, r2)], axis=1)
    roots = np.where(roots > 1e-9, roots, np.inf)
    t = np.nanmin(np.where(np.isnan(roots), np.inf, roots), axis=1)
    return t


def raycast(origin, dirs, shapes, floor=True, sag=(0.0, 0.0, 2.0)):
    """Nearest hit per ray. Returns (t, index) with index -1 = floor, -2 = miss."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    best = np.full(len(d), np.inf)
    idx = np.full(len(d), -2, dtype=np.int64)
    if floor:
        t = _hit_floor(o, d, *sag)
        best = np.minimum(best, t)
        idx[np.isfinite(t)] = -1
    for k, s in enumerate(shapes):
        t = _hit_cylinder(o, d, s) if isinstance(s, Cylinder) else _hit_box(o, d, s)
        closer = t < best
        best[closer] = t[closer]
        idx[closer] = k
    return best, idx


# ---------------------------------------------------------------- scene spec


@dataclass(frozen=True)
class Walker:
    start: tuple
    velocity: tuple = (0.0, 0.0)

    def position(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.asarray(self.start, dtype=np.float64) + np.multiply.outer(t, np.asarray(self.velocity, dtype=np.float64))

    @property
    def heading(self) -> np.ndarray:
        v = np.asarray(self.velocity, dtype=np.float64)
        n = np.linalg.norm(v)
        return v / n if n > 0 else np.array([1.0, 0.0])

    def legs(self, t: float) -> np.ndarray:
        """Two leg centers at time ``t`` (swinging along the heading while walking)."""
        c = self.position(t)
        h = self.heading
        lat = np.array([-h[1], h[0]])
        speed = float(np.linalg.norm(self.velocity))
        swing = 0.1 * min(speed, 1.0) * math.sin(2 * math.pi * t * speed / 1.4) if speed > 0 else 0.0
        return np.stack([c + lat * LEG_SPACING / 2 + h * swing, c - lat * LEG_SPACING / 2 - h * swing])


@dataclass(frozen=True)
class DirtSpot:
    x: float
    y: float
    radius: float = 0.08
    color: tuple = (92, 70, 48)


@dataclass(frozen=True)
class FloorCamera:
    width: int = 320
    height: int = 240
    fx: float = 280.0
    fy: float = 280.0
    mount_height: float = FLOOR_RGBD_HEIGHT
    pitch: float = FLOOR_PITCH
    x: float = FLOOR_CAMERA_X

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, (self.width - 1) / 2, (self.height - 1) / 2)

    @property
    def extrinsic(self) -> np.ndarray:
        return camera_extrinsic(self.mount_height, self.pitch, self.x)


@dataclass
class SceneSpec:
    walkers: list = field(default_factory=list)
    floor_pattern: str = "tiles"
    dirt_spots: list = field(default_factory=list)
    obstacles: list = field(default_factory=list)  # Box instances on the floor, world frame
    clutter: int = 4
    n_frames: int = 20
    rate: float = 10.0
    arena: tuple = (-10.0, 10.0, -10.0, 10.0)
    robot_start: tuple = (0.0, 0.0, 0.0)
    robot_velocity: tuple = (0.0, 0.0)
    sensors: tuple = ("lidar3d", "laser2d", "floor_rgbd")
    camera: FloorCamera = field(default_factory=FloorCamera)
    floor_sag: float = 0.0
    lidar_noise: float = 0.01
    laser_noise: float = 0.01


@dataclass
class SyntheticScene:
    spec: SceneSpec
    frames: list
    manifest: SequenceManifest
    poses: list
    ground_truth: dict
    dirt_masks: list
    object_masks: list

    def save(self, path) -> Path:
        root = save_sequence(self.frames, path, self.manifest, self.poses, self.ground_truth)
        if self.dirt_masks:
            d = root / "gt"
            d.mkdir(exist_ok=True)
            for k, (dm, om) in enumerate(zip(self.dirt_masks, self.object_masks)):
                Image.fromarray(dm.astype(np.uint8) * 255).save(d / f"dirt_{k:06d}.png")
                Image.fromarray(om.astype(np.uint8) * 255).save(d / f"objects_{k:06d}.png")
        return root


# ---------------------------------------------------------------- textures


def floor_texture(pattern: str, xy: np.ndarray, seed: int = 0) -> np.ndarray:
    """RGB floor colors (float, 0..255) at world points ``xy``."""
    x, y = xy[:, 0], xy[:, 1]
    if pattern == "plain":
        return np.tile([178.0, 172.0, 165.0], (len(xy), 1))
    if pattern == "tiles":
        size, grout = 0.3, 0.01
        ix, iy = np.floor(x / size), np.floor(y / size)
        shade = np.where((ix + iy) % 2 == 0, 190.0, 165.0)
        fx, fy = x - ix * size, y - iy * size
        line = (fx < grout) | (fy < grout)
        base = np.where(line, 110.0, shade)
        return np.stack([base, base * 0.97, base * 0.93], axis=1)
    if pattern == "speckle":
        lattice = np.random.default_rng(seed + 7919).normal(0.0, 12.0, (256, 256))
        i = np.floor(x / 0.02).astype(np.int64) % 256
        j = np.floor(y / 0.02).astype(np.int64) % 256
        base = 170.0 + lattice[i, j]
        return np.stack([base, base, base * 0.95], axis=1)
    raise ValueError(f"unknown floor pattern {pattern!r}")


# ---------------------------------------------------------------- sensors


def _lidar_dirs() -> np.ndarray:
    elev = np.radians(np.arange(-15.0, 15.0 + 1e-9, 2.0))
    az = np.radians(np.arange(0.0, 360.0, 0.4))
    E, A = np.meshgrid(elev, az, indexing="ij")
    return np.column_stack([(np.cos(E) * np.cos(A)).ravel(), (np.cos(E) * np.sin(A)).ravel(), np.sin(E).ravel()])


_LIDAR_DIRS = _lidar_dirs()


def render_lidar(T_sensor_world: np.ndarray, shapes, rng, noise: float = 0.01, max_range: float = 30.0, timestamp: float = 0.0) -> PointCloud3D:
    R, o = T_sensor_world[:3, :3], T_sensor_world[:3, 3]
    dirs = _LIDAR_DIRS @ R.T
    t, idx = raycast(o, dirs, shapes)
    keep = np.isfinite(t) & (t < max_range)
    r = t[keep] + rng.normal(0.0, noise, keep.sum())
    pts = _LIDAR_DIRS[keep] * r[:, None]
    inten = np.empty(keep.sum())
    hit = idx[keep]
    inten[hit == -1] = 60.0
    for k, s in enumerate(shapes):
        inten[hit == k] = s.intensity
    inten = np.clip(inten + rng.normal(0.0, 8.0, len(inten)), 0, 255)
    data = np.column_stack([pts, inten]).astype(np.float32)
    return PointCloud3D(data, timestamp, "sensor")


def render_scan(
    T_sensor_world: np.ndarray,
    shapes,
    rng,
    noise: float = 0.01,
    increment: float = math.radians(0.25),
    range_max: float = 30.0,
    timestamp: float = 0.0,
) -> LaserScan2D:
    n = int(round(2 * math.pi / increment))
    angles = -math.pi + increment * np.arange(n)
    local = np.column_stack([np.cos(angles), np.sin(angles), np.zeros(n)])
    R, o = T_sensor_world[:3, :3], T_sensor_world[:3, 3]
    t, _ = raycast(o, local @ R.T, shapes, floor=False)
    r = np.where(np.isfinite(t) & (t < range_max), t + rng.normal(0.0, noise, n), range_max)
    return LaserScan2D(-math.pi, increment, r, range_max, timestamp)


def render_floor_view(
    camera: FloorCamera = FloorCamera(),
    pose: Pose2D | None = None,
    obstacles=(),
    pattern: str = "tiles",
    dirt_spots=(),
    noise: NoiseModel | None = NoiseModel(),
    rng: np.random.Generator | None = None,
    sag: float = 0.0,
    timestamp: float = 0.0,
    texture_seed: int = 0,
    color_noise: float = 2.0,
):
    """Registered depth and color frames of the floor camera.

    Returns (DepthFrame, ColorFrame, dirt mask, obstacle mask). Depth carries
    Gaussian noise sigma(z) when ``noise`` is given and is quantized to 1 mm.
    """
    rng = rng or np.random.default_rng(0)
    k = camera.intrinsics
    H, W = camera.height, camera.width
    v, u = np.mgrid[0:H, 0:W]
    d_cam = np.column_stack([((u - k.cx) / k.fx).ravel(), ((v - k.cy) / k.fy).ravel(), np.ones(H * W)])
    T = sensor_to_world(pose, camera.extrinsic)
    R, o = T[:3, :3], T[:3, 3]
    dirs = d_cam @ R.T
    sag_center = (pose.x if pose else 0.0) + 1.5
    t, idx = raycast(o, dirs, list(obstacles), sag=(sag, sag_center, 2.0))
    hit = np.isfinite(t) & (t < 10.0)
    pts = o + dirs * np.where(hit, t, 0.0)[:, None]

    color = np.zeros((H * W, 3))
    floor = hit & (idx == -1)
    color[floor] = floor_texture(pattern, pts[floor, :2], texture_seed)
    dirt = np.zeros(H * W, dtype=bool)
    for s in dirt_spots:
        inside = floor & (np.hypot(pts[:, 0] - s.x, pts[:, 1] - s.y) <= s.radius)
        color[inside] = 0.15 * color[inside] + 0.85 * np.asarray(s.color, dtype=np.float64)
        dirt |= inside
    obj = hit & (idx >= 0)
    for j, b in enumerate(obstacles):
        sel = hit & (idx == j)
        color[sel] = b.color
    if color_noise > 0:
        color = color + rng.normal(0.0, color_noise, color.shape)
    rgb = np.clip(np.round(color), 0, 255).astype(np.uint8).reshape(H, W, 3)
    rgb[~hit.reshape(H, W)] = 0

    z = np.where(hit, t, 0.0)  # |d_cam.z| = 1 so t is the optical depth
    if noise is not None:
        zz = z[hit]
        z[hit] = zz + rng.normal(0.0, 1.0, zz.shape) * noise.sigma(zz)
    z = np.round(np.clip(z, 0.0, 65.535) * 1000.0) / 1000.0
    depth = DepthFrame(z.reshape(H, W), k, timestamp)
    return depth, ColorFrame(rgb, timestamp), dirt.reshape(H, W), obj.reshape(H, W)


# ---------------------------------------------------------------- generator


def _segment_distance(p, a, b) -> float:
    ab = b - a
    L = float(ab @ ab)
    s = 0.0 if L == 0 else float(np.clip((p - a) @ ab / L, 0, 1))
    return float(np.linalg.norm(p - (a + s * ab)))


def _place_clutter(spec: SceneSpec, rng, duration: float) -> list:
    xmin, xmax, ymin, ymax = spec.arena
    paths = [(w.position(0.0), w.position(duration)) for w in spec.walkers]
    robot = np.asarray(spec.robot_start[:2], dtype=np.float64)
    kinds = ["wall", "crate", "column", "bin"]
    out = []
    for n in range(spec.clutter):
        kind = kinds[n % len(kinds)]
        for _ in range(1000):
            p = np.array([rng.uniform(xmin + 1.5, xmax - 1.5), rng.uniform(ymin + 1.5, ymax - 1.5)])
            clear = 2.5 if kind == "wall" else 1.0
            if np.linalg.norm(p - robot) < 2.0:
                continue
            if any(_segment_distance(p, a, b) < clear for a, b in paths):
                continue
            if any(np.linalg.norm(p - q) < 2.5 for q, _ in out):
                continue
            break
        inten = float(rng.uniform(110, 170))
        if kind == "wall":
            shape = Box.at(p[0], p[1], 3.0, 0.2, 2.0, intensity=inten)
        elif kind == "crate":
            shape = Box.at(p[0], p[1], 0.6, 0.6, 0.8, intensity=inten)
        elif kind == "column":
            shape = Box.at(p[0], p[1], 0.4, 0.4, 1.8, intensity=inten)
        else:
            shape = Cylinder(p[0], p[1], 0.2, 0.0, 0.9, intensity=inten)
        out.append((p, shape))
    return [s for _, s in out]


def _check(spec: SceneSpec) -> float:
    if spec.n_frames < 1:
        raise ValueError("a scene needs at least one frame")
    if spec.rate <= 0:
        raise ValueError("frame rate must be positive")
    xmin, xmax, ymin, ymax = spec.arena
    duration = (spec.n_frames - 1) / spec.rate
    for i, w in enumerate(spec.walkers):
        for p in (w.position(0.0), w.position(duration)):
            if not (xmin + HUMAN_RADIUS <= p[0] <= xmax - HUMAN_RADIUS and ymin + HUMAN_RADIUS <= p[1] <= ymax - HUMAN_RADIUS):
                raise ValueError(f"walker {i} leaves the arena (at {p.round(3).tolist()})")
    return duration


def robot_pose(spec: SceneSpec, t: float) -> Pose2D:
    x0, y0, th = spec.robot_start
    vx, vy = spec.robot_velocity
    return Pose2D(x0 + vx * t, y0 + vy * t, th, t)


def generate_synthetic_scene(spec: SceneSpec | None = None, seed: int = 0, **overrides) -> SyntheticScene:
    """Render every requested sensor for ``spec.n_frames`` frames at ``spec.rate``.

    Same spec and seed give identical output. Keyword overrides replace spec
    fields, e.g. ``generate_synthetic_scene(walkers=[...], n_frames=1)``.
    """
    spec = spec or SceneSpec()
    if overrides:
        spec = SceneSpec(**{**spec.__dict__, **overrides})
    duration = _check(spec)
    ss = np.random.SeedSequence(seed)
    r_layout, r_lidar, r_scan, r_cam = (np.random.default_rng(s) for s in ss.spawn(4))
    clutter = _place_clutter(spec, r_layout, duration)

    T_lidar = mounting_extrinsic(LIDAR3D_HEIGHT)
    T_laser = mounting_extrinsic(LASER2D_HEIGHT)
    cam = spec.camera
    manifest = SequenceManifest(extrinsics={"lidar3d": T_lidar, "laser2d": T_laser, "floor_rgbd": cam.extrinsic})

    frames, poses, dirt_masks, obj_masks = [], [], [], []
    gt_frames = []
    trajectories = {str(i): [] for i in range(len(spec.walkers))}
    for i in range(spec.n_frames):
        t = i / spec.rate
        pose = robot_pose(spec, t)
        poses.append(pose)
        centers = [w.position(t) for w in spec.walkers]
        bodies = [Cylinder(c[0], c[1], HUMAN_RADIUS, 0.0, HUMAN_HEIGHT, intensity=30.0) for c in centers]
        legs = [w.legs(t) for w in spec.walkers]
        leg_shapes = [Cylinder(p[0], p[1], LEG_RADIUS, 0.0, LEG_HEIGHT, intensity=30.0) for pair in legs for p in pair]
        for k, c in enumerate(centers):
            trajectories[str(k)].append([t, float(c[0]), float(c[1])])
        gt_frames.append(
            {
                "timestamp": t,
                "pose": [pose.x, pose.y, pose.theta],
                "humans": [
                    {"id": k, "box": BoundingBox3D((c[0], c[1], HUMAN_HEIGHT / 2), (2 * HUMAN_RADIUS, 2 * HUMAN_RADIUS, HUMAN_HEIGHT)).to_dict()}
                    for k, c in enumerate(centers)
                ],
                "legs": [pair.tolist() for pair in legs],
            }
        )
        if "lidar3d" in spec.sensors:
            T = sensor_to_world(pose, T_lidar)
            frames.append(Frame("lidar3d", t, render_lidar(T, bodies + clutter, r_lidar, spec.lidar_noise, timestamp=t)))
        if "laser2d" in spec.sensors:
            T = sensor_to_world(pose, T_laser)
            frames.append(Frame("laser2d", t, render_scan(T, leg_shapes + clutter, r_scan, spec.laser_noise, timestamp=t)))
        if "floor_rgbd" in spec.sensors:
            depth, color, dm, om = render_floor_view(
                cam, pose, spec.obstacles, spec.floor_pattern, spec.dirt_spots, NoiseModel(), r_cam, spec.floor_sag, t, seed
            )
            frames.append(Frame("floor_rgbd", t, depth))
            frames.append(Frame("floor_rgbd", t, color))
            dirt_masks.append(dm)
            obj_masks.append(om)

    gt = {
        "seed": seed,
        "rate": spec.rate,
        "frames": gt_frames,
        "trajectories": trajectories,
        "clutter": [s.bbox.to_dict() if isinstance(s, Box) else {"cylinder": [s.cx, s.cy, s.radius, s.z1]} for s in clutter],
        "dirt_spots": [[s.x, s.y, s.radius] for s in spec.dirt_spots],
        "obstacles": [b.bbox.to_dict() for b in spec.obstacles],
    }
    return SyntheticScene(spec, frames, manifest, poses, gt, dirt_masks, obj_masks)


# ---------------------------------------------------------------- presets


def crossing_walkers(speed: float = 1.2) -> list[Walker]:
    """Three people crossing the region in front of the robot."""
    return [
        Walker((2.0, -4.0), (0.0, speed)),
        Walker((-1.0, 3.5), (speed * 0.8, -speed * 0.6)),
        Walker((6.0, 1.5), (-speed, 0.0)),
    ]


def walker_detections(
    walkers,
    n_frames: int,
    rate: float = 10.0,
    sigma: float = 0.1,
    detection_probability: float = 0.95,
    seed: int = 0,
    source: Source = Source.LIDAR3D,
):
    """Per-frame noisy position detections of ``walkers`` (no clutter).

    Returns a list of (t, [Detection]) and the ground-truth positions (T, n, 2).
    """
    rng = np.random.default_rng(seed)
    out = []
    truth = np.zeros((n_frames, len(walkers), 2))
    for i in range(n_frames):
        t = i / rate
        dets = []
        for k, w in enumerate(walkers):
            p = w.position(t)
            truth[i, k] = p
            if rng.random() < detection_probability:
                dets.append(Detection(p + rng.normal(0.0, sigma, 2), isotropic(sigma), source, 1.0, t))
        out.append((t, dets))
    return out, truth


def human_cloud(rng, distance: float | None = None, noise: float = 0.01) -> PointCloud3D:
    """A lone person seen by the lidar at ``distance`` (random when None)."""
    d = rng.uniform(2.0, 12.0) if distance is None else distance
    a = rng.uniform(-math.pi, math.pi)
    body = Cylinder(d * math.cos(a), d * math.sin(a), HUMAN_RADIUS, 0.0, HUMAN_HEIGHT, intensity=30.0)
    T = mounting_extrinsic(LIDAR3D_HEIGHT)
    return render_lidar(T, [body], rng, noise)
