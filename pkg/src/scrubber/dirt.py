"""Unsupervised dirt detection by GMM novelty scoring of block gradient statistics,
and the temporal median filter applied when mapping dirt."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .types import ColorFrame

# D65 reference white
_WHITE = np.array([0.95047, 1.0, 1.08883])
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)


@dataclass
class DirtParams:
    block: int = 16
    components: int = 3
    reg_covar: float = 1e-6
    tol: float = 1e-5
    max_iter: int = 200
    percentile: float | None = 5.0
    threshold: float | None = None
    window: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.components <= 8:
            raise ValueError("components must be in 1..8")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("median window must be odd and >= 3")

    @classmethod
    def from_dict(cls, d: dict) -> "DirtParams":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def rgb_to_lab(frame) -> np.ndarray:
    """sRGB (8-bit) to CIE L*a*b* under D65; returns float (H, W, 3)."""
    rgb = frame.rgb if isinstance(frame, ColorFrame) else np.asarray(frame)
    c = rgb.astype(np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB2XYZ.T / _WHITE
    eps, kappa = 216 / 24389, 24389 / 27
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16) / 116)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def gradient_magnitude(channel: np.ndarray) -> np.ndarray:
    """|grad| with central differences (one-sided at the border)."""
    gy, gx = np.gradient(np.asarray(channel, dtype=np.float64))
    return np.hypot(gx, gy)


@dataclass(frozen=True, eq=False)
class BlockGrid:
    block: int
    stats: np.ndarray  # (rows, cols, channels, 2): mean, std of |grad|; NaN where invalid
    valid: np.ndarray  # (rows, cols)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def samples(self, channel: int) -> np.ndarray:
        return self.stats[self.valid, channel, :]


def gradient_blocks(image: np.ndarray, floor_mask=None, object_mask=None, block: int = 16, extra_mask=None) -> BlockGrid:
    """Mean and std of the gradient magnitude in every block and channel.

    Only whole blocks are used. A block is valid when every pixel is in the
    floor mask and none is in the object mask (or the optional extra discard mask).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    H, W, C = img.shape
    for m in (floor_mask, object_mask, extra_mask):
        if m is not None and np.shape(m) != (H, W):
            raise ValueError("masks must match the image size")
    rows, cols = H // block, W // block
    grad = np.stack([gradient_magnitude(img[..., c]) for c in range(C)], axis=-1)
    g = grad[: rows * block, : cols * block].reshape(rows, block, cols, block, C)
    mean = g.mean(axis=(1, 3))
    std = g.std(axis=(1, 3))

    def block_all(m):
        m = np.asarray(m, dtype=bool)[: rows * block, : cols * block]
        return m.reshape(rows, block, cols, block).all(axis=(1, 3))

    def block_any(m):
        m = np.asarray(m, dtype=bool)[: rows * block, : cols * block]
        return m.reshape(rows, block, cols, block).any(axis=(1, 3))

    valid = np.ones((rows, cols), dtype=bool)
    if floor_mask is not None:
        valid &= block_all(floor_mask)
    if object_mask is not None:
        valid &= ~block_any(object_mask)
    if extra_mask is not None:
        valid &= ~block_any(extra_mask)
    stats = np.stack([mean, std], axis=-1)
    stats[~valid] = np.nan
    return BlockGrid(block, stats, valid)


# -- GMM ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: tuple = field(default=(), compare=False)

    @property
    def K(self) -> int:
        return len(self.weights)

    def component_log_density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        d = X.shape[1]
        out = np.empty((len(X), self.K))
        for k in range(self.K):
            L = np.linalg.cholesky(self.covariances[k])
            z = np.linalg.solve(L, (X - self.means[k]).T)
            logdet = 2 * np.log(np.diag(L)).sum()
            out[:, k] = math.log(self.weights[k]) - 0.5 * (d * math.log(2 * math.pi) + logdet + (z * z).sum(axis=0))
        return out

    def score_samples(self, X) -> np.ndarray:
        return logsumexp(self.component_log_density(X), axis=1)


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, K):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.integers(len(X)) if total <= 0 else rng.choice(len(X), p=d2 / total)
        centers.append(X[idx])
    return np.array(centers)


def fit_gmm(samples, K: int = 3, seed: int = 0, reg_covar: float = 1e-6, tol: float = 1e-5, max_iter: int = 200) -> GmmModel:
    """EM for a full-covariance Gaussian mixture, k-means++ initialized.

    ``reg_covar`` is added to every covariance diagonal in each M-step. Stops
    when the relative change of the mean log-likelihood falls below ``tol``.
    The per-iteration log-likelihood trace is kept on the model.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = X.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < K:
        raise ValueError(f"{n} samples cannot support {K} components")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, K, rng)
    labels = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, K))
    resp[np.arange(n), labels] = 1.0

    trace = []
    model = None
    for _ in range(max_iter):
        model = _m_step(X, resp, reg_covar)
        logp = model.component_log_density(X)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        trace.append(ll)
        resp = np.exp(logp - norm[:, None])
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * max(abs(trace[-2]), 1e-12):
            break
    return GmmModel(model.weights, model.means, model.covariances, tuple(trace))


def _m_step(X: np.ndarray, resp: np.ndarray, reg: float) -> GmmModel:
    n, d = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = resp.T @ X / nk[:, None]
    covs = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        D = X - means[k]
        covs[k] = (resp[:, k, None] * D).T @ D / nk[k] + reg * np.eye(d)
    return GmmModel(weights, means, covs)


def fit_channel_models(grid: BlockGrid, params: DirtParams | None = None) -> list[GmmModel]:
    params = params or DirtParams()
    out = []
    for c in range(grid.stats.shape[2]):
        X = grid.samples(c)
        K = min(params.components, len(X))
        out.append(fit_gmm(X, K, params.seed + c, params.reg_covar, params.tol, params.max_iter))
    return out


def score_blocks(grid: BlockGrid, models: list[GmmModel]) -> np.ndarray:
    """Sum over channels of the per-block GMM log-likelihood; NaN for invalid blocks."""
    scores = np.full(grid.shape, np.nan)
    if grid.valid.any():
        scores[grid.valid] = sum(m.score_samples(grid.samples(c)) for c, m in enumerate(models))
    return scores


def dirt_mask(scores: np.ndarray, threshold: float | None = None, percentile: float | None = 5.0, block: int | None = None):
    """Blocks scoring strictly below the threshold are dirt.

    With ``threshold`` None the threshold is the given percentile of the
    valid scores. If all valid scores are equal nothing is novel and the mask
    is empty. With ``block`` the block mask is expanded to pixels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    valid = np.isfinite(scores)
    mask = np.zeros(scores.shape, dtype=bool)
    if valid.any():
        vals = scores[valid]
        if threshold is None:
            if percentile is None:
                raise ValueError("need a threshold or a percentile")
            if vals.max() - vals.min() <= 1e-9 * max(1.0, abs(vals.max())):
                vals = None
            else:
                threshold = float(np.percentile(vals, percentile))
        if vals is not None:
            mask[valid] = scores[valid] < threshold
    if block:
        mask = np.kron(mask, np.ones((block, block), dtype=bool)).astype(bool)
    return mask


def detect_dirt(frame, floor_mask=None, object_mask=None, params: DirtParams | None = None, extra_mask=None):
    """Full per-frame pipeline. Returns (pixel mask sized like the frame, block scores, grid)."""
    params = params or DirtParams()
    lab = rgb_to_lab(frame)
    grid = gradient_blocks(lab, floor_mask, object_mask, params.block, extra_mask)
    H, W = lab.shape[:2]
    if grid.valid.sum() < max(1, params.components):
        return np.zeros((H, W), dtype=bool), np.full(grid.shape, np.nan), grid
    models = fit_channel_models(grid, params)
    scores = score_blocks(grid, models)
    blocks = dirt_mask(scores, params.threshold, params.percentile)
    pix = np.zeros((H, W), dtype=bool)
    b = params.block
    pix[: grid.shape[0] * b, : grid.shape[1] * b] = np.kron(blocks, np.ones((b, b), dtype=bool)).astype(bool)
    return pix, scores, grid


class TemporalMedianFilter:
    """Per world-cell median over the last ``window`` observations.

    A cell produces output only once it has ``window`` observations.
    """

    def __init__(self, window: int = 5):
        if window < 3 or window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        self.window = window
        self._buf: dict = {}

    def update(self, observations: dict) -> dict:
        out = {}
        for cell, value in observations.items():
            buf = self._buf.get(cell)
            if buf is None:
                buf = self._buf[cell] = deque(maxlen=self.window)
            buf.append(float(value))
            if len(buf) == self.window:
                out[cell] = float(np.median(buf))
        return out

    def snapshot(self) -> dict:
        return {c: tuple(b) for c, b in self._buf.items()}


def temporal_median_filter(stream, window: int = 5):
    """Apply :class:`TemporalMedianFilter` to an iterable of {cell: value} dicts."""
    f = TemporalMedianFilter(window)
    return [f.update(obs) for obs in stream]
