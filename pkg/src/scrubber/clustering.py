"""Point-cloud segmentation: voxel grid, RANSAC plane removal, Euclidean
clustering (flat and ring-adaptive) and the human-size volume gate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .types import BoundingBox3D, PointCloud3D

DEFAULT_RINGS = ((5.0, 0.3), (10.0, 0.45), (15.0, 0.6), (20.0, 0.75), (math.inf, 0.9))

# Human-candidate extents, meters, inclusive: (lo, hi) for width, depth, height.
HUMAN_EXTENTS = ((0.2, 1.0), (0.2, 1.0), (0.5, 2.0))


@dataclass
class ClusteringParams:
    leaf: float = 0.06
    plane_threshold: float = 0.02
    min_plane_fraction: float = 0.2
    tolerance: float = 0.45
    min_size: int = 5
    max_size: int = 30000
    rings: tuple = DEFAULT_RINGS
    # Points closer than this to the ground (sensor frame z = -sensor_height) are dropped
    # before clustering the 3D lidar cloud.
    ground_clearance: float = 0.1
    sensor_height: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.rings = tuple((float(r), float(t)) for r, t in self.rings)
        if min(self.leaf, self.plane_threshold, self.tolerance) <= 0:
            raise ValueError("clustering lengths must be positive")
        if not 0 < self.min_size < self.max_size:
            raise ValueError("need 0 < min_size < max_size")
        check_rings(self.rings)

    @classmethod
    def from_dict(cls, d: dict) -> "ClusteringParams":
        d = dict(d)
        if "rings" in d:
            d["rings"] = tuple((math.inf if r is None else r, t) for r, t in d["rings"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "leaf": self.leaf,
            "plane_threshold": self.plane_threshold,
            "min_plane_fraction": self.min_plane_fraction,
            "tolerance": self.tolerance,
            "min_size": self.min_size,
            "max_size": self.max_size,
            "rings": [[None if math.isinf(r) else r, t] for r, t in self.rings],
            "ground_clearance": self.ground_clearance,
            "sensor_height": self.sensor_height,
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class Cluster:
    indices: np.ndarray
    bbox: BoundingBox3D
    centroid: tuple[float, float, float]

    @classmethod
    def from_indices(cls, cloud: PointCloud3D, idx) -> "Cluster":
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        if len(idx) == 0:
            raise ValueError("empty cluster")
        xyz = cloud.xyz[idx]
        idx.setflags(write=False)
        return cls(idx, BoundingBox3D.from_points(xyz), tuple(xyz.mean(axis=0)))

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def range(self) -> float:
        return float(np.linalg.norm(self.centroid))


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray  # unit
    offset: float  # normal . p = offset

    def distance(self, xyz: np.ndarray) -> np.ndarray:
        return xyz @ self.normal - self.offset


def voxel_downsample(cloud: PointCloud3D, leaf: float) -> PointCloud3D:
    """Replace the points of each occupied voxel by their centroid (intensity
    and color averaged too)."""
    if leaf <= 0:
        raise ValueError("leaf must be positive")
    if len(cloud) == 0:
        return cloud
    xyz = cloud.xyz
    keys = np.floor(xyz / leaf).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    n = len(counts)
    out = np.empty((n, 4))
    for c in range(3):
        out[:, c] = np.bincount(inv, xyz[:, c], minlength=n) / counts
    out[:, 3] = np.bincount(inv, cloud.intensity, minlength=n) / counts
    rgb = None
    if cloud.rgb is not None:
        rgb = np.column_stack(
            [np.bincount(inv, cloud.rgb[:, c].astype(np.float64), minlength=n) / counts for c in range(3)]
        )
        rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return PointCloud3D(out.astype(np.float32), cloud.timestamp, cloud.frame_id, rgb)


def _plane_from(p: np.ndarray) -> Plane | None:
    n = np.cross(p[1] - p[0], p[2] - p[0])
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return None
    n = n / norm
    return Plane(n, float(n @ p[0]))


def fit_plane_lsq(xyz: np.ndarray) -> Plane:
    c = xyz.mean(axis=0)
    _, _, vt = np.linalg.svd(xyz - c, full_matrices=False)
    n = vt[-1]
    return Plane(n, float(n @ c))


def ransac_plane(
    xyz: np.ndarray,
    threshold,
    rng: np.random.Generator,
    iterations: int = 200,
    confidence: float = 0.999,
) -> tuple[Plane | None, np.ndarray]:
    """Best-consensus plane. ``threshold`` may be a scalar or a per-point array.

    Stops early once the adaptive iteration bound for ``confidence`` is met.
    Returns the least-squares refit on the consensus set and its inlier mask.
    """
    n = len(xyz)
    best: Plane | None = None
    best_mask = np.zeros(n, dtype=bool)
    if n < 3:
        return None, best_mask
    best_count = 0
    needed = iterations
    it = 0
    while it < min(iterations, needed):
        it += 1
        sample = xyz[rng.choice(n, 3, replace=False)]
        plane = _plane_from(sample)
        if plane is None:
            continue
        mask = np.abs(plane.distance(xyz)) <= threshold
        count = int(mask.sum())
        if count > best_count:
            best, best_mask, best_count = plane, mask, count
            w = count / n
            if w >= 1.0:
                break
            denom = math.log(max(1e-12, 1.0 - w**3))
            needed = math.ceil(math.log(1.0 - confidence) / denom) if denom < 0 else iterations
    if best is None:
        return None, best_mask
    if best_count >= 3:
        refit = fit_plane_lsq(xyz[best_mask])
        refit_mask = np.abs(refit.distance(xyz)) <= threshold
        if refit_mask.sum() >= best_count:
            best, best_mask = refit, refit_mask
    return best, best_mask


def segment_planes(
    cloud: PointCloud3D,
    inlier_threshold: float = 0.02,
    min_inlier_fraction: float = 0.2,
    min_plane_points: int = 100,
    seed: int = 0,
    iterations: int = 200,
) -> tuple[list[Plane], np.ndarray]:
    """Iteratively extract dominant planes.

    A plane is removed while it holds at least ``min_inlier_fraction`` of the
    points still remaining and at least ``min_plane_points``. Without that
    floor the rule never stops: once 15 or fewer points remain, any three of
    them hold a fifth of the rest. Returns the removed planes and a keep-mask
    over the input cloud.
    """
    rng = np.random.default_rng(seed)
    xyz = cloud.xyz
    keep = np.ones(len(xyz), dtype=bool)
    planes: list[Plane] = []
    while keep.sum() >= 3:
        idx = np.flatnonzero(keep)
        plane, mask = ransac_plane(xyz[idx], inlier_threshold, rng, iterations)
        count = int(mask.sum())
        if plane is None or count < max(min_plane_points, 3) or count < min_inlier_fraction * len(idx):
            break
        planes.append(plane)
        keep[idx[mask]] = False
    return planes, keep


def remove_planes(
    cloud: PointCloud3D,
    inlier_threshold: float = 0.02,
    min_inlier_fraction: float = 0.2,
    min_plane_points: int = 100,
    seed: int = 0,
) -> PointCloud3D:
    _, keep = segment_planes(cloud, inlier_threshold, min_inlier_fraction, min_plane_points, seed)
    return cloud.subset(np.flatnonzero(keep))


def _components(xyz: np.ndarray, tolerance: float) -> np.ndarray:
    n = len(xyz)
    pairs = cKDTree(xyz).query_pairs(tolerance, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def _sorted_by_range(clusters: list[Cluster]) -> list[Cluster]:
    return sorted(clusters, key=lambda c: (c.range, int(c.indices[0])))


def euclidean_cluster(
    cloud: PointCloud3D, tolerance: float = 0.45, min_size: int = 5, max_size: int = 30000
) -> list[Cluster]:
    """Connected components of the graph joining points within ``tolerance``.

    Components outside ``[min_size, max_size]`` are discarded; the result is
    ordered by centroid distance from the sensor.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if len(cloud) == 0:
        return []
    labels = _components(cloud.xyz, tolerance)
    order = np.argsort(labels, kind="stable")
    splits = np.flatnonzero(np.diff(labels[order])) + 1
    out = [
        Cluster.from_indices(cloud, grp)
        for grp in np.split(order, splits)
        if min_size <= len(grp) <= max_size
    ]
    return _sorted_by_range(out)


def check_rings(rings) -> None:
    if not rings:
        raise ValueError("ring schedule is empty")
    radii = [r for r, _ in rings]
    if any(b <= a for a, b in zip(radii, radii[1:])) or radii[0] <= 0:
        raise ValueError(f"ring radii must be positive and strictly increasing: {radii}")
    if any(t <= 0 for _, t in rings):
        raise ValueError("ring tolerances must be positive")
    if not math.isinf(radii[-1]):
        raise ValueError("the outermost ring must extend to infinity")


def adaptive_cluster(
    cloud: PointCloud3D, rings=DEFAULT_RINGS, min_size: int = 5, max_size: int = 30000
) -> list[Cluster]:
    """Euclidean clustering with a range-dependent tolerance.

    Points are bucketed into concentric rings by planar range and clustered
    per ring with that ring's tolerance. A cluster reaching within its
    tolerance of a ring boundary is merged with any cluster on the other side
    that also reaches the boundary and lies within the larger of the two
    tolerances of it. Size limits apply after merging.
    """
    rings = tuple((float(r), float(t)) for r, t in rings)
    check_rings(rings)
    if len(cloud) == 0:
        return []
    xyz = cloud.xyz
    rho = np.hypot(xyz[:, 0], xyz[:, 1])
    radii = np.array([r for r, _ in rings])
    ring_of = np.searchsorted(radii, rho, side="right")

    groups: list[np.ndarray] = []
    group_ring: list[int] = []
    for k, (_, tol) in enumerate(rings):
        idx = np.flatnonzero(ring_of == k)
        if len(idx) == 0:
            continue
        labels = _components(xyz[idx], tol)
        for lab in np.unique(labels):
            groups.append(idx[labels == lab])
            group_ring.append(k)

    parent = list(range(len(groups)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for k in range(len(rings) - 1):
        boundary, tol_in, tol_out = rings[k][0], rings[k][1], rings[k + 1][1]
        inner = [g for g, r in enumerate(group_ring) if r == k and rho[groups[g]].max() >= boundary - tol_in]
        outer = [g for g, r in enumerate(group_ring) if r == k + 1 and rho[groups[g]].min() <= boundary + tol_out]
        reach = max(tol_in, tol_out)
        for a in inner:
            tree = cKDTree(xyz[groups[a]])
            for b in outer:
                d, _ = tree.query(xyz[groups[b]], k=1, distance_upper_bound=reach)
                if np.any(np.isfinite(d)):
                    parent[find(a)] = find(b)

    merged: dict[int, list[np.ndarray]] = {}
    for g in range(len(groups)):
        merged.setdefault(find(g), []).append(groups[g])
    out = []
    for parts in merged.values():
        idx = np.concatenate(parts)
        if min_size <= len(idx) <= max_size:
            out.append(Cluster.from_indices(cloud, idx))
    return _sorted_by_range(out)


def is_human_volume(extents) -> bool:
    return all(lo <= v <= hi for v, (lo, hi) in zip(extents, HUMAN_EXTENTS))


def volumetric_filter(clusters: list[Cluster]) -> list[Cluster]:
    """Keep clusters whose box extents lie inside the human size bounds."""
    return [c for c in clusters if is_human_volume(c.bbox.extents)]


def drop_ground(cloud: PointCloud3D, sensor_height: float, clearance: float) -> PointCloud3D:
    """Remove points within ``clearance`` of the floor of a level, z-up sensor."""
    keep = cloud.xyz[:, 2] > clearance - sensor_height
    return cloud.subset(np.flatnonzero(keep))
