"""Floor fitting and obstacle segmentation for the floor-facing depth camera."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from .clustering import Plane, fit_plane_lsq, ransac_plane
from .types import BoundingBox3D, DepthFrame


class NoFloorError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Axial depth noise sigma(z) = sigma0 + sigma1 * (z - z0)^2, meters."""

    sigma0: float = 0.0012
    sigma1: float = 0.0019
    z0: float = 0.4
    k: float = 3.0

    def __post_init__(self):
        if self.sigma0 <= 0 or self.sigma1 < 0 or self.k <= 0:
            raise ValueError("noise model needs sigma0 > 0, sigma1 >= 0, k > 0")

    def sigma(self, z):
        z = np.asarray(z, dtype=np.float64)
        if np.any(z <= 0):
            raise ValueError("sigma(z) needs z > 0")
        return self.sigma0 + self.sigma1 * (z - self.z0) ** 2

    def threshold(self, z):
        return self.k * self.sigma(z)


def sigma(z, noise: NoiseModel = NoiseModel()):
    return noise.sigma(z)


@dataclass
class ObjectParams:
    ransac_iterations: int = 200
    min_inlier_fraction: float = 0.3
    min_valid_pixels: int = 100
    curvature: bool = True
    max_sag: float = 0.05
    sag_span: float = 2.0
    refinements: int = 2
    min_component_px: int = 30
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectParams":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class FloorModel:
    """Plane n.p = d with a quadratic sag c1 u^2 + c2 v^2 + c3 u v over in-plane
    coordinates (u, v) centered at ``origin``. ``n`` points toward the camera."""

    normal: np.ndarray
    offset: float
    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    coeffs: np.ndarray

    def height(self, xyz: np.ndarray) -> np.ndarray:
        """Signed distance above the curved floor surface (camera side positive)."""
        rel = xyz - self.origin
        u, v = rel @ self.u_axis, rel @ self.v_axis
        c1, c2, c3 = self.coeffs
        return xyz @ self.normal - self.offset - (c1 * u * u + c2 * v * v + c3 * u * v)

    @property
    def max_abs_coeff(self) -> float:
        return float(np.abs(self.coeffs).max())


def _oriented(plane: Plane) -> Plane:
    # Camera at the origin must lie on the positive side.
    if -plane.offset < 0:
        return Plane(-plane.normal, -plane.offset)
    return plane


def _basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = a - (a @ n) * n
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def _floor_from(plane: Plane, pts: np.ndarray, coeffs=(0.0, 0.0, 0.0)) -> FloorModel:
    plane = _oriented(plane)
    u, v = _basis(plane.normal)
    c = pts.mean(axis=0)
    origin = c - (c @ plane.normal - plane.offset) * plane.normal
    return FloorModel(plane.normal, plane.offset, origin, u, v, np.asarray(coeffs, dtype=np.float64))


def _fit_sag(floor: FloorModel, pts: np.ndarray, bound: float) -> FloorModel:
    rel = pts - floor.origin
    u, v = rel @ floor.u_axis, rel @ floor.v_axis
    r = pts @ floor.normal - floor.offset
    A = np.column_stack([u * u, v * v, u * v, u, v, np.ones_like(u)])
    sol, *_ = np.linalg.lstsq(A, r, rcond=None)
    # Linear terms re-tilt the plane; fold them back by refitting below.
    coeffs = np.clip(sol[:3], -bound, bound)
    residual_plane = pts - np.outer(coeffs[0] * u * u + coeffs[1] * v * v + coeffs[2] * u * v, floor.normal)
    base = _oriented(fit_plane_lsq(residual_plane))
    f = _floor_from(base, pts, coeffs)
    return f


def fit_floor(depth: DepthFrame, noise: NoiseModel = NoiseModel(), params: ObjectParams | None = None):
    """Fit the floor surface. Returns (FloorModel, inlier mask over pixels).

    RANSAC plane with per-point threshold k * sigma(z), then (optionally) a
    quadratic sag correction fitted on the inliers with the inlier set
    recomputed against the corrected surface.
    """
    params = params or ObjectParams()
    xyz, valid = depth.backproject()
    if len(xyz) < params.min_valid_pixels:
        raise NoFloorError(f"only {len(xyz)} valid depth pixels")
    thr = noise.threshold(xyz[:, 2])
    rng = np.random.default_rng(params.seed)
    plane, mask = ransac_plane(xyz, thr, rng, params.ransac_iterations)
    if plane is None or mask.mean() < params.min_inlier_fraction:
        raise NoFloorError("no plane holds enough of the depth pixels")
    floor = _floor_from(plane, xyz[mask])
    bound = params.max_sag / (params.sag_span / 2) ** 2
    for _ in range(params.refinements if params.curvature else 0):
        floor = _fit_sag(floor, xyz[mask], bound)
        mask = np.abs(floor.height(xyz)) <= thr
    if mask.mean() < params.min_inlier_fraction:
        raise NoFloorError("no floor surface holds enough of the depth pixels")
    img = np.zeros(valid.shape, dtype=bool)
    img[valid] = mask
    return floor, img


def detect_objects(
    depth: DepthFrame, floor: FloorModel, noise: NoiseModel = NoiseModel(), params: ObjectParams | None = None
):
    """Obstacle mask and boxes (camera frame).

    A pixel is an obstacle when it rises more than k * sigma(z) above the
    floor surface and belongs to an 8-connected component of at least
    ``min_component_px`` such pixels.
    Returns (obstacle mask, floor mask, boxes, pixel counts).
    """
    params = params or ObjectParams()
    xyz, valid = depth.backproject()
    h = floor.height(xyz)
    thr = noise.threshold(xyz[:, 2])
    raw = np.zeros(valid.shape, dtype=bool)
    raw[valid] = h > thr
    floor_mask = np.zeros(valid.shape, dtype=bool)
    floor_mask[valid] = np.abs(h) <= thr
    labels, n = ndimage.label(raw, structure=np.ones((3, 3), dtype=int))
    obstacle = np.zeros_like(raw)
    boxes, counts = [], []
    if n:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        pix = np.full(valid.shape, -1, dtype=np.int64)
        pix[valid] = np.arange(len(xyz))
        for lab in np.flatnonzero(sizes >= params.min_component_px):
            if lab == 0:
                continue
            comp = labels == lab
            obstacle |= comp
            boxes.append(BoundingBox3D.from_points(xyz[pix[comp]]))
            counts.append(int(sizes[lab]))
    return obstacle, floor_mask, boxes, counts


def mask_png(obstacle: np.ndarray, floor_mask: np.ndarray) -> np.ndarray:
    """0 floor, 128 unknown, 255 obstacle."""
    out = np.full(obstacle.shape, 128, dtype=np.uint8)
    out[floor_mask] = 0
    out[obstacle] = 255
    return out
