"""Multi-sensor people tracker on the ground plane.

Constant-velocity motion with white-acceleration noise, EKF or UKF
correction with linear position observations, chi-square gating, NN or
NNJPDA association and M-of-N track initiation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.sparse.csgraph import connected_components

from .types import SOURCE_ORDER, Detection, Source

log = logging.getLogger(__name__)

H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


class TrackStatus(str, Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DELETED = "deleted"


def chi2_threshold_2dof(probability: float) -> float:
    """Quantile of the chi-square distribution with 2 degrees of freedom."""
    if not 0 < probability < 1:
        raise ValueError("gate probability must be in (0, 1)")
    return -2.0 * math.log(1.0 - probability)


DEFAULT_SIGMAS = {
    Source.LIDAR3D.value: 0.1,
    Source.RGBD_UPPER_BODY.value: 0.15,
    Source.RGBD_LEGS.value: 0.15,
    Source.LASER_LEGS.value: 0.2,
}


@dataclass
class TrackerConfig:
    q: float = 0.5
    sigmas: dict = field(default_factory=lambda: dict(DEFAULT_SIGMAS))
    gate_probability: float = 0.95
    association: str = "nn"  # "nn" | "nnjpda"
    filter: str = "ukf"  # "ekf" | "ukf"
    init_hits: int = 3
    init_window: float = 1.0
    deletion_timeout: float = 2.0
    clutter_density: float = 0.05
    detection_probability: float = 0.9
    initial_velocity_sigma: float = 1.5
    max_component: int = 10
    use_detection_covariance: bool = False

    def __post_init__(self):
        self.sigmas = {**DEFAULT_SIGMAS, **self.sigmas}
        if self.association not in ("nn", "nnjpda"):
            raise ValueError(f"unknown association mode {self.association!r}")
        if self.filter not in ("ekf", "ukf"):
            raise ValueError(f"unknown filter {self.filter!r}")
        if self.init_hits < 2:
            raise ValueError("init_hits (M) must be >= 2")
        for name in ("q", "init_window", "deletion_timeout", "clutter_density", "initial_velocity_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.detection_probability <= 1:
            raise ValueError("detection_probability must be in (0, 1]")
        if any(s <= 0 for s in self.sigmas.values()):
            raise ValueError("observation sigmas must be positive")

    @property
    def gate_threshold(self) -> float:
        return chi2_threshold_2dof(self.gate_probability)

    def R(self, det: Detection) -> np.ndarray:
        if self.use_detection_covariance:
            return np.array(det.covariance)
        s = self.sigmas[det.source.value]
        return np.eye(2) * s * s

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


@dataclass
class Track:
    mean: np.ndarray
    cov: np.ndarray
    id: int | None = None
    status: TrackStatus = TrackStatus.TENTATIVE
    last_update: float = 0.0
    time: float = 0.0
    history: list = field(default_factory=list)
    hits: list = field(default_factory=list)
    sources: set = field(default_factory=set)

    def snapshot(self) -> "TrackSnapshot":
        return TrackSnapshot(
            self.id, self.time, self.mean.copy(), self.cov.copy(), self.status, tuple(self.history), frozenset(self.sources)
        )


@dataclass(frozen=True, eq=False)
class TrackSnapshot:
    id: int | None
    timestamp: float
    mean: np.ndarray
    cov: np.ndarray
    status: TrackStatus
    history: tuple
    sources: frozenset

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[2:]


# -- filter primitives -------------------------------------------------------


def transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def process_noise(dt: float, q: float) -> np.ndarray:
    a, b, c = dt**3 / 3, dt**2 / 2, dt
    return q * np.array([[a, 0, b, 0], [0, a, 0, b], [b, 0, c, 0], [0, b, 0, c]])


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return (P + P.T) / 2


def predict(mean: np.ndarray, cov: np.ndarray, dt: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    if dt < 0:
        raise ValueError("cannot predict backwards in time")
    if dt == 0:
        return mean.copy(), cov.copy()
    F = transition(dt)
    return F @ mean, _symmetrize(F @ cov @ F.T + process_noise(dt, q))


def _check_pd(S: np.ndarray) -> None:
    if not np.all(np.isfinite(S)) or np.linalg.eigvalsh(_symmetrize(S)).min() <= 0:
        raise np.linalg.LinAlgError("innovation covariance is not positive definite")


def update_ekf(mean, cov, z, R) -> tuple[np.ndarray, np.ndarray]:
    nu = np.asarray(z, dtype=np.float64) - H @ mean
    S = H @ cov @ H.T + R
    _check_pd(S)
    K = np.linalg.solve(S, H @ cov).T
    I_KH = np.eye(4) - K @ H
    P = I_KH @ cov @ I_KH.T + K @ R @ K.T
    return mean + K @ nu, _symmetrize(P)


UKF_ALPHA, UKF_BETA, UKF_KAPPA = 1e-3, 2.0, 0.0


def sigma_points(mean, cov, alpha=UKF_ALPHA, beta=UKF_BETA, kappa=UKF_KAPPA):
    n = len(mean)
    lam = alpha**2 * (n + kappa) - n
    L = np.linalg.cholesky((n + lam) * cov)
    X = np.vstack([mean, mean + L.T, mean - L.T])
    wm = np.full(2 * n + 1, 1.0 / (2 * (n + lam)))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = lam / (n + lam) + (1 - alpha**2 + beta)
    return X, wm, wc


def ukf_predict(mean, cov, dt: float, q: float):
    if dt < 0:
        raise ValueError("cannot predict backwards in time")
    if dt == 0:
        return mean.copy(), cov.copy()
    X, wm, wc = sigma_points(mean, cov)
    Y = X @ transition(dt).T
    m = wm @ Y
    D = Y - m
    return m, _symmetrize((wc[:, None] * D).T @ D + process_noise(dt, q))


def update_ukf(mean, cov, z, R):
    X, wm, wc = sigma_points(mean, cov)
    Z = X @ H.T
    zhat = wm @ Z
    dZ = Z - zhat
    dX = X - mean
    S = (wc[:, None] * dZ).T @ dZ + R
    _check_pd(S)
    Pxz = (wc[:, None] * dX).T @ dZ
    K = np.linalg.solve(S, Pxz.T).T
    m = mean + K @ (np.asarray(z, dtype=np.float64) - zhat)
    P = _symmetrize(cov - K @ S @ K.T)
    return m, P


def innovation(mean, cov, z, R) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(z, dtype=np.float64) - H @ mean, H @ cov @ H.T + R


def mahalanobis2(mean, cov, z, R) -> float:
    nu, S = innovation(mean, cov, z, R)
    try:
        return float(nu @ np.linalg.solve(S, nu))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular innovation covariance") from exc


def gate(mean, cov, z, R, threshold: float = chi2_threshold_2dof(0.95)) -> tuple[bool, float]:
    d2 = mahalanobis2(mean, cov, z, R)
    return d2 <= threshold, d2


def gaussian_likelihood(nu: np.ndarray, S: np.ndarray) -> float:
    d2 = float(nu @ np.linalg.solve(S, nu))
    return math.exp(-0.5 * d2) / (2 * math.pi * math.sqrt(np.linalg.det(S)))


# -- association -------------------------------------------------------------


def associate_nn(cost: np.ndarray, gated: np.ndarray) -> list[tuple[int, int]]:
    """Greedy matching: repeatedly take the cheapest gated (track, detection) pair
    whose track and detection are both still free."""
    cost = np.asarray(cost, dtype=np.float64)
    gated = np.asarray(gated, dtype=bool)
    ti, di = np.nonzero(gated)
    order = sorted(zip(cost[ti, di], ti, di))
    used_t, used_d = set(), set()
    out = []
    for _, t, d in order:
        if t in used_t or d in used_d:
            continue
        used_t.add(t)
        used_d.add(d)
        out.append((int(t), int(d)))
    return sorted(out)


def _components(gated: np.ndarray):
    nt, nd = gated.shape
    A = np.zeros((nt + nd, nt + nd), dtype=bool)
    A[:nt, nt:] = gated
    A[nt:, :nt] = gated.T
    n, labels = connected_components(A, directed=False)
    for k in range(n):
        tr = np.flatnonzero(labels[:nt] == k)
        de = np.flatnonzero(labels[nt:] == k)
        if len(tr):
            yield tr, de


def jpda_marginals(likelihood: np.ndarray, gated: np.ndarray, pd: float, clutter: float) -> np.ndarray:
    """Marginal association probabilities by exhaustive joint-event enumeration.

    Returns an (n_tracks, n_dets + 1) array; column ``n_dets`` holds the
    probability that the track was not detected. A joint event assigns each
    track at most one gated detection and each detection at most one track;
    its weight is prod(pd * g_ij / clutter) over assignments times
    prod(1 - pd) over missed tracks.
    """
    nt, nd = gated.shape
    beta = np.zeros((nt, nd + 1))
    miss = 1.0 - pd
    ratio = np.where(gated, pd * likelihood / clutter, 0.0)
    total = 0.0
    assign = [-1] * nt

    def rec(t: int, used: int, weight: float):
        nonlocal total
        if t == nt:
            total += weight
            for i, j in enumerate(assign):
                beta[i, nd if j < 0 else j] += weight
            return
        assign[t] = -1
        rec(t + 1, used, weight * miss)
        for j in np.flatnonzero(gated[t]):
            if not used >> int(j) & 1:
                assign[t] = int(j)
                rec(t + 1, used | (1 << int(j)), weight * ratio[t, j])
        assign[t] = -1

    rec(0, 0, 1.0)
    if total <= 0:
        beta[:, nd] = 1.0
        return beta
    return beta / total


def associate_nnjpda(
    likelihood: np.ndarray,
    gated: np.ndarray,
    cost: np.ndarray,
    pd: float = 0.9,
    clutter: float = 0.05,
    max_component: int = 10,
) -> tuple[list[tuple[int, int]], np.ndarray]:
    """JPDA marginals per connected gate component, resolved to a one-to-one
    matching by greedy selection on 1 - beta. Components larger than
    ``max_component`` in either dimension fall back to plain NN."""
    gated = np.asarray(gated, dtype=bool)
    nt, nd = gated.shape
    beta = np.zeros((nt, nd + 1))
    beta[:, nd] = 1.0
    matches: list[tuple[int, int]] = []
    for tr, de in _components(gated):
        if len(de) == 0:
            continue
        sub = gated[np.ix_(tr, de)]
        if len(tr) > max_component or len(de) > max_component:
            log.warning("jpda component %dx%d too large, falling back to NN", len(tr), len(de))
            pairs = associate_nn(cost[np.ix_(tr, de)], sub)
        else:
            b = jpda_marginals(likelihood[np.ix_(tr, de)], sub, pd, clutter)
            beta[np.ix_(tr, de)] = b[:, :-1]
            beta[tr, nd] = b[:, -1]
            pairs = associate_nn(1.0 - b[:, :-1], sub)
        matches.extend((int(tr[a]), int(de[b_])) for a, b_ in pairs)
    return sorted(matches), beta


# -- tracker -----------------------------------------------------------------


class Tracker:
    """Single-owner tracking state machine; call :meth:`step` in time order."""

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.tracks: list[Track] = []
        self.time: float | None = None
        self._next_id = 1

    def _predict(self, tr: Track, t: float) -> None:
        fn = ukf_predict if self.config.filter == "ukf" else predict
        tr.mean, tr.cov = fn(tr.mean, tr.cov, t - tr.time, self.config.q)
        tr.time = t

    def _update(self, tr: Track, det: Detection) -> None:
        fn = update_ukf if self.config.filter == "ukf" else update_ekf
        tr.mean, tr.cov = fn(tr.mean, tr.cov, det.position, self.config.R(det))
        tr.last_update = det.timestamp
        tr.hits.append(det.timestamp)
        tr.sources.add(det.source)

    def _associate(self, tracks: list[Track], dets: list[Detection], scale: float) -> list[tuple[int, int]]:
        nt, nd = len(tracks), len(dets)
        if nt == 0 or nd == 0:
            return []
        thr = self.config.gate_threshold * scale
        cost = np.full((nt, nd), np.inf)
        lik = np.zeros((nt, nd))
        for i, tr in enumerate(tracks):
            for j, det in enumerate(dets):
                R = self.config.R(det)
                nu, S = innovation(tr.mean, tr.cov, det.position, R)
                cost[i, j] = float(nu @ np.linalg.solve(S, nu))
                lik[i, j] = gaussian_likelihood(nu, S)
        gated = cost <= thr
        if self.config.association == "nnjpda":
            pairs, _ = associate_nnjpda(
                lik, gated, cost, self.config.detection_probability, self.config.clutter_density, self.config.max_component
            )
            return pairs
        return associate_nn(cost, gated)

    def _in_any_gate(self, det: Detection, tracks: list[Track]) -> bool:
        thr = self.config.gate_threshold
        R = self.config.R(det)
        # Twice the gate distance: a stray return of a tracked person must not
        # seed a second track.
        for tr in tracks:
            if mahalanobis2(tr.mean, tr.cov, det.position, R) <= thr * 4.0:
                return True
        return False

    def _spawn(self, det: Detection, t: float) -> Track:
        vs = self.config.initial_velocity_sigma
        cov = np.zeros((4, 4))
        cov[:2, :2] = self.config.R(det)
        cov[2, 2] = cov[3, 3] = vs * vs
        tr = Track(np.array([*det.position, 0.0, 0.0]), cov, None, TrackStatus.TENTATIVE, t, t)
        tr.hits.append(t)
        tr.sources.add(det.source)
        tr.history.append((t, float(det.position[0]), float(det.position[1])))
        return tr

    def step(self, detections, t: float | None = None) -> list[TrackSnapshot]:
        """Advance to time ``t`` (default: the detections' timestamp) and fuse
        ``detections``. Returns snapshots of the confirmed tracks."""
        dets = sorted(detections, key=Detection.sort_key)
        if t is None:
            if not dets:
                raise ValueError("step without detections needs an explicit time")
            t = dets[0].timestamp
        if self.time is not None and t < self.time:
            raise ValueError(f"time regression: {t} < {self.time}")
        self.time = t
        cfg = self.config

        for tr in self.tracks:
            tr.sources = set()
            self._predict(tr, t)

        spawned: list[Track] = []
        by_source: dict[Source, list[Detection]] = {}
        for d in dets:
            by_source.setdefault(d.source, []).append(d)
        for src in sorted(by_source, key=SOURCE_ORDER.get):
            group = by_source[src]
            free = list(range(len(group)))
            for status, scale in ((TrackStatus.CONFIRMED, 1.0), (TrackStatus.TENTATIVE, 4.0)):
                pool = [tr for tr in self.tracks if tr.status is status]
                pairs = self._associate(pool, [group[k] for k in free], scale)
                taken = set()
                for a, b in pairs:
                    self._update(pool[a], group[free[b]])
                    taken.add(free[b])
                free = [k for k in free if k not in taken]
            for k in free:
                det = group[k]
                if not self._in_any_gate(det, self.tracks + spawned):
                    spawned.append(self._spawn(det, t))

        for tr in self.tracks:
            if tr.last_update == t:
                tr.history.append((t, float(tr.mean[0]), float(tr.mean[1])))
            tr.hits = [h for h in tr.hits if t - h <= cfg.init_window + 1e-9]
            if tr.status is TrackStatus.TENTATIVE:
                if len(set(tr.hits)) >= cfg.init_hits:
                    tr.status = TrackStatus.CONFIRMED
                    tr.id = self._next_id
                    self._next_id += 1
                elif t - tr.last_update > cfg.init_window:
                    tr.status = TrackStatus.DELETED
            elif t - tr.last_update > cfg.deletion_timeout:
                tr.status = TrackStatus.DELETED
        self.tracks = [tr for tr in self.tracks if tr.status is not TrackStatus.DELETED] + spawned
        for tr in self.tracks:
            np.linalg.cholesky(tr.cov)
        return self.confirmed()

    def confirmed(self) -> list[TrackSnapshot]:
        out = [tr.snapshot() for tr in self.tracks if tr.status is TrackStatus.CONFIRMED]
        return sorted(out, key=lambda s: s.id)


def track_rows(snapshots: list[TrackSnapshot]) -> list[list]:
    """Rows for the track log: timestamp,id,x,y,vx,vy,cov_xx,cov_xy,cov_yy,n_sources."""
    return [
        [s.timestamp, s.id, *s.mean.tolist(), s.cov[0, 0], s.cov[0, 1], s.cov[1, 1], len(s.sources)]
        for s in snapshots
    ]


TRACK_CSV_HEADER = ["timestamp", "id", "x", "y", "vx", "vy", "cov_xx", "cov_xy", "cov_yy", "n_sources"]
