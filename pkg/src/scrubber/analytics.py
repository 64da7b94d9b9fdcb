"""Heatmaps over the floor and evaluation metrics (box IoU, detection scores, ROC)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .types import BoundingBox3D


@dataclass
class HeatmapGrid:
    origin: tuple[float, float]
    cell: float
    counts: np.ndarray  # (ny, nx)
    observed: np.ndarray | None = None  # dirt maps only; False = never seen

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    @property
    def values(self) -> np.ndarray:
        """Counts normalized to [0, 1] by the maximum; NaN marks unobserved cells."""
        top = self.counts.max(initial=0.0)
        v = self.counts / top if top > 0 else np.zeros_like(self.counts, dtype=np.float64)
        if self.observed is not None:
            v = np.where(self.observed, v, np.nan)
        return v

    def cell_of(self, xy) -> tuple[np.ndarray, np.ndarray]:
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        ix = np.floor((xy[:, 0] - self.origin[0]) / self.cell).astype(int)
        iy = np.floor((xy[:, 1] - self.origin[1]) / self.cell).astype(int)
        return ix, iy

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ix", "iy", "x", "y", "count", "value"])
            vals = self.values
            for iy in range(self.shape[0]):
                for ix in range(self.shape[1]):
                    x = self.origin[0] + (ix + 0.5) * self.cell
                    y = self.origin[1] + (iy + 0.5) * self.cell
                    v = vals[iy, ix]
                    w.writerow([ix, iy, repr(x), repr(y), repr(float(self.counts[iy, ix])), "" if math.isnan(v) else repr(float(v))])

    def to_png(self, path, cmap: str = "hot") -> None:
        from matplotlib import colormaps
        from PIL import Image

        vals = self.values
        rgba = colormaps[cmap](np.nan_to_num(vals, nan=0.0))
        rgb = (rgba[..., :3] * 255).round().astype(np.uint8)
        rgb[np.isnan(vals)] = (96, 96, 160)
        Image.fromarray(rgb[::-1]).save(path)


def grid_for(points: np.ndarray, cell: float = 0.2, margin: float = 0.0) -> tuple[tuple[float, float], tuple[int, int]]:
    """Origin (snapped to the cell lattice) and (ny, nx) covering ``points``."""
    pts = np.atleast_2d(points)
    lo = np.floor((pts.min(axis=0) - margin) / cell) * cell
    hi = pts.max(axis=0) + margin
    nx = int(np.floor((hi[0] - lo[0]) / cell)) + 1
    ny = int(np.floor((hi[1] - lo[1]) / cell)) + 1
    return (float(lo[0]), float(lo[1])), (ny, nx)


def _densify(traj: np.ndarray, step: float) -> np.ndarray:
    if len(traj) < 2:
        return traj
    out = [traj[:1]]
    for a, b in zip(traj[:-1], traj[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
        s = np.linspace(0, 1, n + 1)[1:, None]
        out.append(a + s * (b - a))
    return np.vstack(out)


def trajectory_heatmap(
    trajectories,
    cell: float = 0.2,
    origin: tuple[float, float] | None = None,
    shape: tuple[int, int] | None = None,
    mode: str = "trajectories",
) -> HeatmapGrid:
    """Count, per cell, the trajectories passing through it (each at most once).

    ``mode="dwell"`` counts every sample instead. Segments between samples are
    densified so fast movers do not skip cells. The grid grows to cover all
    points when ``origin``/``shape`` are too small or absent.
    """
    if mode not in ("trajectories", "dwell"):
        raise ValueError(f"unknown heatmap mode {mode!r}")
    trajs = [np.atleast_2d(np.asarray(t, dtype=np.float64))[:, :2] for t in trajectories if len(t)]
    if mode == "trajectories":
        trajs = [_densify(t, cell / 4) for t in trajs]
    if not trajs:
        if origin is None or shape is None:
            origin, shape = (0.0, 0.0), (1, 1)
        return HeatmapGrid(origin, cell, np.zeros(shape))
    allpts = np.vstack(trajs)
    if origin is None or shape is None:
        origin, shape = grid_for(allpts, cell)
    else:
        hi = np.array(origin) + np.array([shape[1], shape[0]]) * cell
        if np.any(allpts < origin) or np.any(allpts >= hi):
            lo = np.minimum(np.array(origin), allpts.min(axis=0))
            lo = np.array(origin) - np.ceil((np.array(origin) - lo) / cell) * cell
            top = np.maximum(hi, allpts.max(axis=0) + cell)
            nx, ny = np.ceil((top - lo) / cell - 1e-9).astype(int)
            origin, shape = (float(lo[0]), float(lo[1])), (int(ny), int(nx))
    grid = HeatmapGrid(origin, cell, np.zeros(shape))
    for t in trajs:
        ix, iy = grid.cell_of(t)
        ix = np.clip(ix, 0, shape[1] - 1)
        iy = np.clip(iy, 0, shape[0] - 1)
        if mode == "trajectories":
            cells = np.unique(np.column_stack([iy, ix]), axis=0)
            grid.counts[cells[:, 0], cells[:, 1]] += 1
        else:
            np.add.at(grid.counts, (iy, ix), 1)
    return grid


def dirt_heatmap(observations, cell: float = 0.2, origin=None, shape=None) -> HeatmapGrid:
    """First-perceived floor state per cell.

    ``observations`` is a time-ordered iterable of (xy (N, 2), values (N,)).
    The first value seen in a cell is kept for the whole mission; cells never
    observed stay unknown.
    """
    obs = [(np.atleast_2d(np.asarray(xy, dtype=np.float64)), np.asarray(v, dtype=np.float64).ravel()) for xy, v in observations]
    obs = [(xy, v) for xy, v in obs if len(v)]
    if origin is None or shape is None:
        if not obs:
            origin, shape = (0.0, 0.0), (1, 1)
        else:
            origin, shape = grid_for(np.vstack([xy for xy, _ in obs]), cell)
    grid = HeatmapGrid(origin, cell, np.zeros(shape), np.zeros(shape, dtype=bool))
    for xy, v in obs:
        ix, iy = grid.cell_of(xy)
        inside = (ix >= 0) & (ix < shape[1]) & (iy >= 0) & (iy < shape[0])
        for x, y, val in zip(ix[inside], iy[inside], v[inside]):
            if not grid.observed[y, x]:
                grid.observed[y, x] = True
                grid.counts[y, x] = val
    return grid


# -- evaluation --------------------------------------------------------------


def iou3d(a: BoundingBox3D, b: BoundingBox3D) -> float:
    lo = np.maximum(a.min_corner, b.min_corner)
    hi = np.minimum(a.max_corner, b.max_corner)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = a.volume + b.volume - inter
    # clamp: corner round-off can push identical boxes a hair above 1
    return min(1.0, inter / union) if union > 0 else 0.0


def _match_frame(preds, scores, gts, thr):
    """Greedy by descending score; returns a TP flag per prediction."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    used = set()
    tp = np.zeros(len(preds), dtype=bool)
    for k in order:
        best, best_j = thr, None
        for j, g in enumerate(gts):
            if j in used:
                continue
            v = iou3d(preds[k], g)
            if v >= best:
                best, best_j = v, j
        if best_j is not None:
            used.add(best_j)
            tp[k] = True
    return tp


def average_precision(tp_sorted: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP given TP flags sorted by descending score."""
    if n_gt == 0 or len(tp_sorted) == 0:
        return 0.0
    tp = np.cumsum(tp_sorted)
    fp = np.cumsum(~tp_sorted)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[:-1]))


def detection_metrics(frames, iou_threshold: float = 0.5, negatives: int | None = None) -> dict:
    """Pooled detection metrics.

    ``frames`` is an iterable of (pred_boxes, pred_scores, gt_boxes). Accuracy
    needs the number of correctly rejected candidates (``negatives``, true
    negatives); without it accuracy is None. With no predictions precision is
    reported as 0 and flagged.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    all_scores, all_tp = [], []
    n_gt = 0
    for preds, scores, gts in frames:
        tp = _match_frame(list(preds), list(scores), list(gts), iou_threshold)
        all_scores.extend(scores)
        all_tp.extend(tp.tolist())
        n_gt += len(gts)
    scores = np.asarray(all_scores, dtype=np.float64)
    tp = np.asarray(all_tp, dtype=bool)
    n_tp = int(tp.sum())
    n_fp = int(len(tp) - n_tp)
    n_fn = n_gt - n_tp
    undefined = len(tp) == 0
    precision = 0.0 if undefined else n_tp / len(tp)
    recall = n_tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    order = np.argsort(-scores, kind="stable")
    ap = average_precision(tp[order], n_gt)
    accuracy = None
    if negatives is not None:
        total = n_tp + n_fp + n_fn + negatives
        accuracy = (n_tp + negatives) / total if total else 0.0
    return {
        "tp": n_tp,
        "fp": n_fp,
        "fn": n_fn,
        "tn": negatives,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "ap": ap,
        "accuracy": accuracy,
        "precision_undefined": undefined,
        "iou_threshold": iou_threshold,
    }


def block_labels(mask: np.ndarray, block: int) -> np.ndarray:
    """Majority label per whole block of a pixel mask."""
    m = np.asarray(mask, dtype=np.float64)
    rows, cols = m.shape[0] // block, m.shape[1] // block
    return m[: rows * block, : cols * block].reshape(rows, block, cols, block).mean(axis=(1, 3)) > 0.5


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """ROC curve sweeping a threshold over every distinct score.

    Larger scores mean "more likely positive". Returns (fpr, tpr) from (0, 0)
    to (1, 1); NaN scores are ignored.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    keep = np.isfinite(s)
    s, y = s[keep], y[keep]
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        raise ValueError("ROC needs both positive and negative labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tps / P]
    fpr = np.r_[0.0, fps / N]
    return fpr, tpr


def auc(fpr, tpr) -> float:
    trap = getattr(np, "trapezoid", None) or np.trapz
    return float(trap(tpr, fpr))
