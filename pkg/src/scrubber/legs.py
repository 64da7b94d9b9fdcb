"""Close-range leg detectors.

RGB-D: color-histogram pairing of upright leg-sized clusters in a registered
cloud. 2D laser: scan segmentation, geometric segment features and a
boosted decision-stump classifier.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .clustering import euclidean_cluster, segment_planes, voxel_downsample
from .types import (
    ColorFrame,
    DepthFrame,
    Detection,
    LaserScan2D,
    PointCloud3D,
    Pose2D,
    Source,
    isotropic,
    sensor_to_world,
    transform_points,
)

RADIUS_SENTINEL = 10.0
SEGMENT_FEATURES = ("beams", "width", "circularity", "radius", "mean_curvature", "mean_speed", "linearity")


@dataclass
class LegParams:
    leaf: float = 0.03
    plane_threshold: float = 0.02
    min_plane_fraction: float = 0.2
    # Planes smaller than this are never removed, so thin legs are not eaten
    # as "planes" once the floor is gone.
    min_plane_points: int = 300
    band_height: float = 0.55
    cluster_tolerance: float = 0.1
    min_cluster_size: int = 10
    max_cluster_size: int = 5000
    max_foot_height: float = 0.2
    upright_ratio: float = 2.0
    volume_bounds: tuple = (0.001, 0.05)
    similarity_threshold: float = 0.8
    max_pair_distance: float = 1.0
    rgbd_sigma: float = 0.15
    jump_threshold: float = 0.15
    pairing_max: float = 0.8
    laser_sigma: float = 0.2
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "LegParams":
        d = dict(d)
        if "volume_bounds" in d:
            d["volume_bounds"] = tuple(d["volume_bounds"])
        return cls(**d)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        out = asdict(self)
        out["volume_bounds"] = list(self.volume_bounds)
        return out


# -- RGB-D -------------------------------------------------------------------


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("vectors must have equal length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def color_histogram(rgb, bins: int = 64) -> np.ndarray:
    """L1-normalized histogram over a uniform per-channel RGB quantization."""
    rgb = np.asarray(rgb, dtype=np.uint8).reshape(-1, 3)
    if len(rgb) == 0:
        raise ValueError("histogram of an empty point set")
    q = round(bins ** (1 / 3))
    if q**3 != bins:
        raise ValueError("bins must be a perfect cube")
    cell = (rgb.astype(np.int64) * q) // 256
    idx = (cell[:, 0] * q + cell[:, 1]) * q + cell[:, 2]
    return np.bincount(idx, minlength=bins) / len(rgb)


def register_rgbd(depth: DepthFrame, color: ColorFrame, extrinsic: np.ndarray | None = None) -> PointCloud3D:
    """Colored cloud from a pixel-aligned depth/color pair, in the base frame
    when ``extrinsic`` (camera-to-base) is given."""
    if (depth.height, depth.width) != (color.height, color.width):
        raise ValueError("depth and color frames are not registered")
    xyz, valid = depth.backproject()
    if extrinsic is not None:
        xyz = transform_points(extrinsic, xyz)
    return PointCloud3D(
        xyz.astype(np.float32), depth.timestamp, "base" if extrinsic is not None else "sensor", color.rgb[valid]
    )


def _ground_height_fn(planes):
    ground = None
    best = math.inf
    for p in planes:
        tilt = abs(abs(p.normal[2]) - 1.0)
        if tilt < best and tilt < 0.1:
            best, ground = tilt, p
    if ground is None:
        return lambda xy: np.zeros(len(xy))
    n, d = ground.normal, ground.offset
    return lambda xy: (d - xy[:, 0] * n[0] - xy[:, 1] * n[1]) / n[2]


@dataclass(frozen=True)
class LegCandidate:
    centroid: np.ndarray
    extents: tuple
    base_height: float
    histogram: np.ndarray


def leg_candidates(cloud: PointCloud3D, params: LegParams | None = None) -> list[LegCandidate]:
    """Steps up to the histogram: downsample, strip planes, cluster the low band,
    keep clusters that pass the shape rules (see ``LegParams``)."""
    params = params or LegParams()
    if cloud.rgb is None:
        raise ValueError("leg detection needs a colored cloud")
    if len(cloud) == 0:
        return []
    down = voxel_downsample(cloud, params.leaf)
    planes, keep = segment_planes(
        down, params.plane_threshold, params.min_plane_fraction, params.min_plane_points, params.seed
    )
    ground_z = _ground_height_fn(planes)
    rest = down.subset(np.flatnonzero(keep))
    if len(rest) == 0:
        return []
    h = rest.xyz[:, 2] - ground_z(rest.xyz)
    band = rest.subset(np.flatnonzero(h <= params.band_height))
    if len(band) == 0:
        return []
    out = []
    for c in euclidean_cluster(band, params.cluster_tolerance, params.min_cluster_size, params.max_cluster_size):
        xyz = band.xyz[c.indices]
        base = float((xyz[:, 2] - ground_z(xyz)).min())
        w, d, hgt = c.bbox.extents
        vol = w * d * hgt
        if base > params.max_foot_height:
            continue
        if hgt < params.upright_ratio * max(w, d):
            continue
        if not params.volume_bounds[0] <= vol <= params.volume_bounds[1]:
            continue
        out.append(LegCandidate(np.asarray(c.centroid), (w, d, hgt), base, color_histogram(band.rgb[c.indices])))
    return out


def pair_leg_candidates(centroids, histograms, similarity_threshold: float = 0.8, max_distance: float = 1.0):
    """Greedy closest-first pairing of candidates whose histograms are similar
    enough (strictly above the threshold) and whose ground-plane distance is
    strictly below ``max_distance``. Returns (i, j, similarity) triples."""
    c = np.asarray(centroids, dtype=np.float64)
    pairs = []
    for i in range(len(c)):
        for j in range(i + 1, len(c)):
            dist = float(np.hypot(*(c[i, :2] - c[j, :2])))
            if dist >= max_distance:
                continue
            sim = cosine_similarity(histograms[i], histograms[j])
            if sim > similarity_threshold:
                pairs.append((dist, i, j, sim))
    pairs.sort()
    used: set[int] = set()
    out = []
    for _, i, j, sim in pairs:
        if i in used or j in used:
            continue
        used.update((i, j))
        out.append((i, j, sim))
    return out


def detect_legs_rgbd(
    cloud: PointCloud3D, params: LegParams | None = None, pose: Pose2D | None = None
) -> list[Detection]:
    """Leg pairs in a registered colored cloud given in the z-up robot base frame."""
    params = params or LegParams()
    cands = leg_candidates(cloud, params)
    if len(cands) < 2:
        return []
    pairs = pair_leg_candidates(
        [c.centroid for c in cands], [c.histogram for c in cands], params.similarity_threshold, params.max_pair_distance
    )
    T = sensor_to_world(pose, None)
    out = []
    for i, j, sim in pairs:
        mid = (cands[i].centroid + cands[j].centroid) / 2
        xy = transform_points(T, mid[None])[0, :2]
        out.append(Detection(xy, isotropic(params.rgbd_sigma), Source.RGBD_LEGS, max(0.0, sim), cloud.timestamp))
    return out


# -- 2D laser ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScanSegment:
    points: np.ndarray  # (k, 2) in the laser frame
    beams: np.ndarray  # beam indices

    def __len__(self) -> int:
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def segment_scan(scan: LaserScan2D, jump_threshold: float = 0.15, min_points: int = 3) -> list[ScanSegment]:
    """Split consecutive valid returns wherever the range jumps by more than
    ``jump_threshold``; invalid returns also split. Short segments are dropped."""
    if jump_threshold <= 0:
        raise ValueError("jump_threshold must be positive")
    valid = scan.valid()
    pts = scan.points()
    r = scan.ranges
    segments = []
    current: list[int] = []
    for k in range(len(r)):
        if not valid[k]:
            if current:
                segments.append(current)
            current = []
            continue
        if current and abs(r[k] - r[current[-1]]) > jump_threshold:
            segments.append(current)
            current = []
        current.append(k)
    if current:
        segments.append(current)
    return [ScanSegment(pts[s], np.asarray(s)) for s in segments if len(s) >= min_points]


def fit_circle(points: np.ndarray) -> tuple[np.ndarray, float] | None:
    """Algebraic (Kasa) circle fit; None when the points are collinear."""
    x, y = points[:, 0], points[:, 1]
    A = np.column_stack([x, y, np.ones_like(x)])
    sol, _, rank, _ = np.linalg.lstsq(A, x**2 + y**2, rcond=None)
    if rank < 3:
        return None
    center = sol[:2] / 2
    r2 = sol[2] + center @ center
    if r2 <= 0:
        return None
    return center, math.sqrt(r2)


def _line_residual(points: np.ndarray) -> float:
    c = points - points.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return float(s[-1] ** 2 / len(points))


def _mean_curvature(points: np.ndarray) -> float:
    a, b, c = points[:-2], points[1:-1], points[2:]
    ab = np.linalg.norm(b - a, axis=1)
    bc = np.linalg.norm(c - b, axis=1)
    ca = np.linalg.norm(a - c, axis=1)
    cross = (b - a)[:, 0] * (c - a)[:, 1] - (b - a)[:, 1] * (c - a)[:, 0]
    denom = ab * bc * ca
    k = np.where(denom > 0, 2.0 * np.abs(cross) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(k.mean())


def segment_features(segment: ScanSegment, previous: np.ndarray | None = None, dt: float | None = None) -> np.ndarray:
    """Feature vector ordered as ``SEGMENT_FEATURES``.

    Mean speed is 0 unless the previous scan's points and the time step are
    given, in which case it is the mean nearest-neighbour displacement per second.
    """
    p = np.asarray(segment.points, dtype=np.float64)
    if len(p) < 3:
        raise ValueError("segment features need at least 3 points")
    width = float(np.linalg.norm(p[-1] - p[0]))
    linearity = _line_residual(p)
    fit = fit_circle(p)
    if fit is None:
        radius, circularity = RADIUS_SENTINEL, linearity
    else:
        center, r = fit
        circularity = float(np.mean((np.linalg.norm(p - center, axis=1) - r) ** 2))
        radius = min(r, RADIUS_SENTINEL)
    speed = 0.0
    if previous is not None and dt and len(previous):
        d, _ = cKDTree(np.asarray(previous, dtype=np.float64)).query(p)
        speed = float(d.mean() / dt)
    return np.array([len(p), width, circularity, radius, _mean_curvature(p), speed, linearity])


@dataclass(frozen=True)
class Stump:
    feature: int
    threshold: float
    polarity: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.where(X[:, self.feature] > self.threshold, self.polarity, -self.polarity)


@dataclass(frozen=True)
class AdaBoostModel:
    stumps: tuple
    alphas: tuple
    history: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.stumps) < 1 or len(self.stumps) != len(self.alphas):
            raise ValueError("model needs at least one weighted stump")
        if not all(math.isfinite(a) for a in self.alphas):
            raise ValueError("stump weights must be finite")

    def score(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return sum(a * s.predict(X) for s, a in zip(self.stumps, self.alphas))

    def to_dict(self) -> dict:
        return {
            "format": "scrubber-adaboost/1",
            "features": list(SEGMENT_FEATURES),
            "stumps": [
                {"feature": s.feature, "threshold": s.threshold, "polarity": s.polarity, "alpha": a}
                for s, a in zip(self.stumps, self.alphas)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdaBoostModel":
        st = d["stumps"]
        return cls(
            tuple(Stump(int(s["feature"]), float(s["threshold"]), int(s["polarity"])) for s in st),
            tuple(float(s["alpha"]) for s in st),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "AdaBoostModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _best_stump(X: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[Stump, float]:
    best = (math.inf, None)
    pos_w = w * (y > 0)
    neg_w = w * (y < 0)
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        v = X[order, f]
        lp = np.concatenate([[0.0], np.cumsum(pos_w[order])])
        ln = np.concatenate([[0.0], np.cumsum(neg_w[order])])
        # Left of the split is predicted -polarity.
        err_p = lp + (ln[-1] - ln)
        err_n = ln + (lp[-1] - lp)
        ok = np.ones(len(v) + 1, dtype=bool)
        ok[1:-1] = v[1:] > v[:-1]
        err = np.where(ok, np.minimum(err_p, err_n), np.inf)
        k = int(np.argmin(err))
        if err[k] < best[0]:
            if k == 0:
                thr = v[0] - 1.0
            elif k == len(v):
                thr = v[-1] + 1.0
            else:
                thr = (v[k - 1] + v[k]) / 2
            pol = 1 if err_p[k] < err_n[k] else -1
            best = (float(err[k]), Stump(f, float(thr), pol))
    return best[1], best[0]


def adaboost_train(features, labels, T: int = 50) -> AdaBoostModel:
    """Discrete AdaBoost over decision stumps.

    Stops early when the best stump's weighted error reaches 0.5 or the
    training set is fitted perfectly. ``model.history`` records per-round
    errors together with the exponential-loss bound.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.where(np.asarray(labels) > 0, 1, -1)
    if len(np.unique(y)) < 2:
        raise ValueError("training needs both classes")
    if T < 1:
        raise ValueError("T must be >= 1")
    w = np.full(len(y), 1.0 / len(y))
    stumps, alphas = [], []
    hist = {"weighted_error": [], "train_error": [], "bound": []}
    score = np.zeros(len(y))
    bound = 1.0
    for _ in range(T):
        stump, err = _best_stump(X, y, w)
        if stump is None or err >= 0.5:
            break
        e = min(max(err, 1e-10), 1 - 1e-10)
        alpha = 0.5 * math.log((1 - e) / e)
        h = stump.predict(X)
        stumps.append(stump)
        alphas.append(alpha)
        score += alpha * h
        bound *= 2 * math.sqrt(e * (1 - e))
        hist["weighted_error"].append(err)
        hist["train_error"].append(float(np.mean(np.where(score > 0, 1, -1) != y)))
        hist["bound"].append(bound)
        if err <= 0:
            break
        w = w * np.exp(-alpha * y * h)
        w /= w.sum()
    if not stumps:
        raise ValueError("no stump better than chance")
    return AdaBoostModel(tuple(stumps), tuple(alphas), hist)


def adaboost_classify(model: AdaBoostModel, features) -> tuple[int, float]:
    """Label (+1 leg) and margin normalized by the total stump weight, in [-1, 1]."""
    s = float(model.score(features)[0])
    return (1 if s > 0 else -1), s / sum(model.alphas)


def detect_legs_2d(
    scan: LaserScan2D,
    model: AdaBoostModel,
    params: LegParams | None = None,
    pose: Pose2D | None = None,
    extrinsic: np.ndarray | None = None,
    previous: LaserScan2D | None = None,
) -> list[Detection]:
    """Legs in one scan. Positive segments closer than ``pairing_max`` are
    merged into a person at their midpoint; a lone leg yields a detection at
    half the confidence."""
    params = params or LegParams()
    segs = segment_scan(scan, params.jump_threshold)
    if not segs:
        return []
    prev_pts, dt = None, None
    if previous is not None:
        prev_pts = previous.points()[previous.valid()]
        dt = scan.timestamp - previous.timestamp
    F = np.stack([segment_features(s, prev_pts, dt) for s in segs])
    score = model.score(F)
    margin = score / sum(model.alphas)
    legs = [(segs[k].centroid, (1 + margin[k]) / 2) for k in range(len(segs)) if score[k] > 0]

    cand = []
    for i in range(len(legs)):
        for j in range(i + 1, len(legs)):
            d = float(np.linalg.norm(legs[i][0] - legs[j][0]))
            if d < params.pairing_max:
                cand.append((d, i, j))
    cand.sort()
    used: set[int] = set()
    people = []
    for _, i, j in cand:
        if i in used or j in used:
            continue
        used.update((i, j))
        people.append(((legs[i][0] + legs[j][0]) / 2, (legs[i][1] + legs[j][1]) / 2))
    for i, (c, conf) in enumerate(legs):
        if i not in used:
            people.append((c, 0.5 * conf))

    T = sensor_to_world(pose, extrinsic)
    out = []
    for xy, conf in people:
        p = transform_points(T, np.array([[xy[0], xy[1], 0.0]]))[0, :2]
        out.append(Detection(p, isotropic(params.laser_sigma), Source.LASER_LEGS, float(np.clip(conf, 0, 1)), scan.timestamp))
    return out
