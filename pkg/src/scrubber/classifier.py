"""3D-lidar human classifier: cluster features, [-1, 1] scaling, an RBF
support vector machine trained by SMO, and Platt probability calibration."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import Cluster, ClusteringParams, adaptive_cluster, drop_ground, volumetric_filter
from .types import Detection, PointCloud3D, Pose2D, Source, isotropic, sensor_to_world, transform_points

log = logging.getLogger(__name__)

N_SLICES = 10
N_INTENSITY_BINS = 25
INTENSITY_RANGE = (0.0, 255.0)

# Name and width of each feature block, in vector order.
FEATURE_LAYOUT = (
    ("f1_point_count", 1),
    ("f2_min_range", 1),
    ("f3_covariance", 6),
    ("f4_inertia", 6),
    ("f5_slices", 2 * N_SLICES),
    ("f6_intensity", 2 + N_INTENSITY_BINS),
    ("f7_slice_range", N_SLICES),
)
N_FEATURES = sum(w for _, w in FEATURE_LAYOUT)
assert N_FEATURES == 71

_TRIU = np.triu_indices(3)

LIDAR3D_SIGMA = 0.1


def feature_slices() -> dict[str, slice]:
    out, start = {}, 0
    for name, width in FEATURE_LAYOUT:
        out[name] = slice(start, start + width)
        start += width
    return out


def features_from_points(xyz: np.ndarray, intensity: np.ndarray) -> np.ndarray:
    """71-dimensional descriptor of one cluster, coordinates in the sensor frame.

    f5 holds (x extent, y extent) per horizontal slice and f7 the slice
    centroid range; the ten slices split the vertical extent equally and
    empty slices contribute zeros. f6 is (mean, std, 25-bin normalized
    histogram over [0, 255]) of the return intensity.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    intensity = np.asarray(intensity, dtype=np.float64)
    n = len(xyz)
    if n == 0:
        raise ValueError("cannot describe an empty cluster")
    f = np.zeros(N_FEATURES)
    s = feature_slices()
    f[s["f1_point_count"]] = n
    f[s["f2_min_range"]] = np.linalg.norm(xyz, axis=1).min()

    centered = xyz - xyz.mean(axis=0)
    cov = centered.T @ centered / (n - 1) if n > 1 else np.zeros((3, 3))
    f[s["f3_covariance"]] = cov[_TRIU]

    x, y, z = centered.T
    inertia = np.array(
        [
            [np.sum(y**2 + z**2), -np.sum(x * y), -np.sum(x * z)],
            [-np.sum(x * y), np.sum(x**2 + z**2), -np.sum(y * z)],
            [-np.sum(x * z), -np.sum(y * z), np.sum(x**2 + y**2)],
        ]
    ) / n
    f[s["f4_inertia"]] = inertia[_TRIU]

    zmin, zmax = xyz[:, 2].min(), xyz[:, 2].max()
    span = zmax - zmin
    if span > 0:
        k = np.minimum((N_SLICES * (xyz[:, 2] - zmin) / span).astype(int), N_SLICES - 1)
    else:
        k = np.zeros(n, dtype=int)
    slices = np.zeros((N_SLICES, 2))
    ranges = np.zeros(N_SLICES)
    for j in range(N_SLICES):
        members = xyz[k == j]
        if len(members) == 0:
            continue
        slices[j] = np.ptp(members[:, 0]), np.ptp(members[:, 1])
        ranges[j] = np.linalg.norm(members.mean(axis=0))
    f[s["f5_slices"]] = slices.ravel()
    f[s["f7_slice_range"]] = ranges

    hist, _ = np.histogram(np.clip(intensity, *INTENSITY_RANGE), bins=N_INTENSITY_BINS, range=INTENSITY_RANGE)
    f[s["f6_intensity"]] = np.concatenate([[intensity.mean(), intensity.std()], hist / n])
    return f


def extract_features(cluster: Cluster, cloud: PointCloud3D) -> np.ndarray:
    return features_from_points(cloud.xyz[cluster.indices], cloud.intensity[cluster.indices])


# -- scaling -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScalingRanges:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("scaling ranges need lo <= hi per dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


def fit_scaling(features) -> ScalingRanges:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("need at least one training vector")
    return ScalingRanges(X.min(axis=0), X.max(axis=0))


def apply_scaling(features, ranges: ScalingRanges) -> np.ndarray:
    """Affine map of each dimension so the training [min, max] becomes [-1, 1].

    Values outside the training range are not clamped. Constant dimensions map to 0.
    """
    X = np.asarray(features, dtype=np.float64)
    span = ranges.hi - ranges.lo
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (X - ranges.lo) / safe - 1.0
    return np.where(span > 0, out, 0.0)


# -- SMO ---------------------------------------------------------------------


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class SmoResult:
    alpha: np.ndarray
    rho: float
    objective: float
    iterations: int


def smo_solve(K: np.ndarray, y: np.ndarray, C: float, eps: float = 1e-3, max_iter: int = 1_000_000) -> SmoResult:
    """Minimize 0.5 a'Qa - sum(a) s.t. 0 <= a <= C, y'a = 0, Q = yy' * K.

    Sequential minimal optimization with second-order working-set selection;
    stops when the maximal KKT violation drops below ``eps``.
    """
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    Q = (y[:, None] * y[None, :]) * K
    QD = np.diag(K).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    tau = 1e-12
    it = 0
    while it < max_iter:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
        score = -y * G
        if not up.any() or not low.any():
            break
        i = int(np.argmax(np.where(up, score, -np.inf)))
        gmax = score[i]
        gmin = np.min(np.where(low, score, np.inf))
        if gmax - gmin < eps:
            break
        b = gmax - score
        cand = low & (b > 0)
        quad = QD[i] + QD - 2.0 * y[i] * Q[i] * y
        quad = np.where(quad > 0, quad, tau)
        obj = np.where(cand, -(b**2) / quad, np.inf)
        j = int(np.argmin(obj))
        if not np.isfinite(obj[j]):
            break
        it += 1
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            qc = QD[i] + QD[j] + 2.0 * Q[i, j]
            qc = qc if qc > 0 else tau
            delta = (-G[i] - G[j]) / qc
            diff = ai - aj
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, C - diff
            elif alpha[j] > C:
                alpha[j], alpha[i] = C, C + diff
        else:
            qc = QD[i] + QD[j] - 2.0 * Q[i, j]
            qc = qc if qc > 0 else tau
            delta = (G[i] - G[j]) / qc
            total = ai + aj
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, total - C
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > C:
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, total - C
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
        G += Q[i] * (alpha[i] - ai) + Q[j] * (alpha[j] - aj)
    return SmoResult(alpha, _rho(alpha, G, y, C), float(0.5 * alpha @ (G - 1.0)), it)


def _rho(alpha, G, y, C) -> float:
    yG = y * G
    at_upper = alpha >= C
    at_lower = alpha <= 0
    free = ~at_upper & ~at_lower
    if free.any():
        return float(yG[free].mean())
    ub_mask = (at_upper & (y < 0)) | (at_lower & (y > 0))
    lb_mask = (at_upper & (y > 0)) | (at_lower & (y < 0))
    ub = yG[ub_mask].min() if ub_mask.any() else np.inf
    lb = yG[lb_mask].max() if lb_mask.any() else -np.inf
    return float((ub + lb) / 2)


def dual_objective(alpha: np.ndarray, K: np.ndarray, y: np.ndarray) -> float:
    ay = alpha * y
    return float(0.5 * ay @ K @ ay - alpha.sum())


# -- Platt calibration -------------------------------------------------------


def fit_sigmoid(dec: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Fit P(y=+1|d) = 1 / (1 + exp(A d + B)) by regularized Newton iteration."""
    dec = np.asarray(dec, dtype=np.float64)
    pos = labels > 0
    prior1, prior0 = pos.sum(), (~pos).sum()
    hi, lo = (prior1 + 1.0) / (prior1 + 2.0), 1.0 / (prior0 + 2.0)
    t = np.where(pos, hi, lo)
    A, B = 0.0, math.log((prior0 + 1.0) / (prior1 + 1.0))
    min_step, sigma, eps = 1e-10, 1e-12, 1e-5

    def nll(a, b):
        f = dec * a + b
        return float(np.sum(np.where(f >= 0, t * f + np.log1p(np.exp(-f)), (t - 1) * f + np.log1p(np.exp(f)))))

    fval = nll(A, B)
    for _ in range(100):
        f = dec * A + B
        p = np.where(f >= 0, np.exp(-f) / (1 + np.exp(-f)), 1 / (1 + np.exp(f)))
        q = 1 - p
        d2 = p * q
        h11 = sigma + np.sum(dec * dec * d2)
        h22 = sigma + np.sum(d2)
        h21 = np.sum(dec * d2)
        d1 = t - p
        g1, g2 = np.sum(dec * d1), np.sum(d1)
        if abs(g1) < eps and abs(g2) < eps:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= min_step:
            nA, nB = A + step * dA, B + step * dB
            nf = nll(nA, nB)
            if nf < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nf
                break
            step /= 2
        else:
            log.warning("sigmoid calibration line search failed")
            break
    return float(A), float(B)


def sigmoid_probability(dec, A: float, B: float):
    f = np.asarray(dec, dtype=np.float64) * A + B
    return np.where(f >= 0, np.exp(-f) / (1 + np.exp(-f)), 1 / (1 + np.exp(f)))


# -- model -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SvmModel:
    gamma: float
    C: float
    support_vectors: np.ndarray  # scaled space
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float  # decision = sum(dual_coef * K) + bias
    prob_a: float = 0.0
    prob_b: float = 0.0
    scaling: ScalingRanges | None = None
    cv_table: list = field(default_factory=list)

    def __post_init__(self):
        if self.gamma <= 0 or self.C <= 0:
            raise ValueError("gamma and C must be positive")
        sv = np.atleast_2d(np.asarray(self.support_vectors, dtype=np.float64))
        if len(sv) < 1:
            raise ValueError("a model needs at least one support vector")
        object.__setattr__(self, "support_vectors", sv)
        object.__setattr__(self, "dual_coef", np.asarray(self.dual_coef, dtype=np.float64).ravel())

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]

    def decision(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim}-dimensional input, got {X.shape[1]}")
        if self.scaling is not None:
            X = apply_scaling(X, self.scaling)
        return rbf_kernel(X, self.support_vectors, self.gamma) @ self.dual_coef + self.bias

    def to_dict(self) -> dict:
        return {
            "format": "scrubber-svm/1",
            "kernel": {"type": "rbf", "gamma": self.gamma},
            "C": self.C,
            "bias": self.bias,
            "calibration": {"A": self.prob_a, "B": self.prob_b, "form": "1/(1+exp(A*d+B))"},
            "feature_layout": [[n, w] for n, w in FEATURE_LAYOUT] if self.dim == N_FEATURES else None,
            "scaling": None if self.scaling is None else self.scaling.to_dict(),
            "support_vectors": self.support_vectors.tolist(),
            "dual_coef": self.dual_coef.tolist(),
            "cv_table": self.cv_table,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        sc = d.get("scaling")
        return cls(
            gamma=d["kernel"]["gamma"],
            C=d["C"],
            support_vectors=np.asarray(d["support_vectors"]),
            dual_coef=np.asarray(d["dual_coef"]),
            bias=d["bias"],
            prob_a=d["calibration"]["A"],
            prob_b=d["calibration"]["B"],
            scaling=None if sc is None else ScalingRanges(np.asarray(sc["lo"]), np.asarray(sc["hi"])),
            cv_table=d.get("cv_table", []),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SvmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_pm1(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype == bool:
        return np.where(y, 1.0, -1.0)
    y = y.astype(np.float64)
    return np.where(y > 0, 1.0, -1.0)


def _fit_binary(X, y, C, gamma, eps) -> tuple[np.ndarray, np.ndarray, float]:
    K = rbf_kernel(X, X, gamma)
    res = smo_solve(K, y, C, eps)
    sv = res.alpha > 0
    if not sv.any():
        sv[0] = True
    return X[sv], (res.alpha * y)[sv], -res.rho


def stratified_folds(y: np.ndarray, folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=int)
    for cls in (1.0, -1.0):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = np.arange(len(idx)) % folds
    return fold_of


def svm_train(
    features,
    labels,
    C_grid=(0.1, 1.0, 10.0),
    gamma_grid=(0.01, 0.1, 1.0),
    folds: int = 5,
    seed: int = 0,
    eps: float = 1e-3,
    scale: bool = True,
) -> SvmModel:
    """Grid-search (C, gamma) by stratified k-fold accuracy, then train on all data.

    Ties in CV accuracy go to the smaller C, then the smaller gamma. The
    probability sigmoid is fitted on the out-of-fold decision values of the
    selected pair.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = _as_pm1(labels)
    if len(np.unique(y)) < 2:
        raise ValueError("training needs both classes")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if len(y) < folds:
        raise ValueError(f"{len(y)} examples cannot fill {folds} folds")
    scaling = fit_scaling(X) if scale else None
    Xs = apply_scaling(X, scaling) if scale else X
    fold_of = stratified_folds(y, folds, seed)

    table = []
    best = None
    for C, gamma in sorted(itertools.product(C_grid, gamma_grid)):
        dec = np.zeros(len(y))
        accs = []
        for k in range(folds):
            tr, te = fold_of != k, fold_of == k
            if not te.any():
                continue
            if len(np.unique(y[tr])) < 2:
                # a degenerate fold predicts its only class (or abstains when empty)
                dec[te] = np.sign(y[tr].sum()) if tr.any() else 0.0
            else:
                sv, coef, b = _fit_binary(Xs[tr], y[tr], C, gamma, eps)
                dec[te] = rbf_kernel(Xs[te], sv, gamma) @ coef + b
            accs.append(float(np.mean(np.where(dec[te] > 0, 1.0, -1.0) == y[te])))
        mean_acc = float(np.mean(accs))
        table.append({"C": C, "gamma": gamma, "fold_accuracy": accs, "mean_accuracy": mean_acc})
        if best is None or mean_acc > best[0]:
            best = (mean_acc, C, gamma, dec)
    _, C, gamma, oof = best
    A, B = fit_sigmoid(oof, y)
    sv, coef, b = _fit_binary(Xs, y, C, gamma, eps)
    log.info("svm: C=%g gamma=%g cv=%.4f sv=%d", C, gamma, best[0], len(sv))
    return SvmModel(gamma, C, sv, coef, b, A, B, scaling, table)


def svm_predict(model: SvmModel, vec) -> tuple[int, float]:
    """Label (+1 human, -1 other) and calibrated probability of the +1 class."""
    d = float(model.decision(vec)[0])
    return (1 if d > 0 else -1), float(sigmoid_probability(d, model.prob_a, model.prob_b))


# -- detector ----------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    cluster: Cluster
    probability: float
    label: int


def classify_candidates(cloud: PointCloud3D, model: SvmModel, params: ClusteringParams | None = None) -> list[Candidate]:
    """Human-sized clusters of a sensor-frame lidar cloud with their classifier output."""
    params = params or ClusteringParams()
    if len(cloud) == 0:
        return []
    if params.ground_clearance > 0:
        cloud = drop_ground(cloud, params.sensor_height, params.ground_clearance)
    clusters = volumetric_filter(adaptive_cluster(cloud, params.rings, params.min_size, params.max_size))
    if not clusters:
        return []
    X = np.stack([extract_features(c, cloud) for c in clusters])
    dec = model.decision(X)
    prob = sigmoid_probability(dec, model.prob_a, model.prob_b)
    return [Candidate(c, float(p), 1 if d > 0 else -1) for c, p, d in zip(clusters, prob, dec)]


def candidates_cloud(cloud: PointCloud3D, params: ClusteringParams) -> PointCloud3D:
    """The cloud the candidate cluster indices refer to."""
    if params.ground_clearance > 0:
        return drop_ground(cloud, params.sensor_height, params.ground_clearance)
    return cloud


def detect_humans_3d(
    cloud: PointCloud3D,
    model: SvmModel,
    params: ClusteringParams | None = None,
    threshold: float = 0.5,
    pose: Pose2D | None = None,
    extrinsic: np.ndarray | None = None,
) -> list[Detection]:
    T = sensor_to_world(pose, extrinsic)
    out = []
    for cand in classify_candidates(cloud, model, params):
        if cand.probability < threshold:
            continue
        xy = transform_points(T, np.asarray(cand.cluster.centroid)[None])[0, :2]
        out.append(Detection(xy, isotropic(LIDAR3D_SIGMA), Source.LIDAR3D, cand.probability, cloud.timestamp))
    return out
