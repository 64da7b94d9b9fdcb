"""``scrubber`` command line: synthetic data, training, detection, tracking,
floor analysis, evaluation and heatmaps over sequence directories."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import analytics, synth
from .classifier import (
    LIDAR3D_SIGMA,
    SvmModel,
    candidates_cloud,
    classify_candidates,
    extract_features,
    features_from_points,
    svm_train,
)
from .clustering import adaptive_cluster, volumetric_filter
from .config import ConfigError, PipelineConfig, load_config
from .dirt import TemporalMedianFilter, detect_dirt
from .io import SequenceError, load_sequence, read_cloud
from .legs import AdaBoostModel, adaboost_train, detect_legs_2d, detect_legs_rgbd, register_rgbd, segment_features, segment_scan
from .objects import NoFloorError, detect_objects, fit_floor, mask_png
from .tracking import TRACK_CSV_HEADER, Tracker, track_rows
from .types import (
    BoundingBox3D,
    DepthFrame,
    Detection,
    LaserScan2D,
    PointCloud3D,
    Source,
    isotropic,
    sensor_to_world,
    transform_points,
)

log = logging.getLogger("scrubber")

LIDAR_SENSOR = "lidar3d"
LASER_SENSOR = "laser2d"
FLOOR_SENSOR = "floor_rgbd"
FRONT_SENSOR = "front_rgbd"


class CliError(Exception):
    """Bad input reported to the user as a JSON error."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message, 2)


def _fail(kind: str, message: str, code: int):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    raise SystemExit(code)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _outdir(cfg: PipelineConfig) -> Path:
    if not cfg.out:
        raise CliError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sequence(cfg: PipelineConfig):
    if not cfg.input:
        raise CliError("--input is required")
    return load_sequence(cfg.input)


# ---------------------------------------------------------------- synth


def _scenario_walkers(name: str):
    if name == "crossing":
        return synth.crossing_walkers()
    if name == "single":
        return [synth.Walker((-4.0, 2.0), (1.2, 0.0))]
    if name == "static":
        return [synth.Walker((3.0, 0.0))]
    if name == "empty":
        return []
    raise CliError(f"unknown scenario {name!r}")


def cmd_synth(cfg: PipelineConfig, args) -> dict:
    out = _outdir(cfg)
    rng = np.random.default_rng(cfg.seed)
    duration = (args.frames - 1) / args.rate if args.frames > 0 else 0.0
    reach = args.robot_speed * duration
    dirt = [
        synth.DirtSpot(float(rng.uniform(1.0, 2.0 + reach)), float(rng.uniform(-0.4, 0.4)), float(rng.uniform(0.05, 0.1)))
        for _ in range(args.dirt)
    ]
    obstacles = [
        synth.Box.at(float(rng.uniform(1.0, 2.0 + reach)), float(rng.uniform(-0.4, 0.4)), 0.1, 0.1, float(rng.uniform(0.02, 0.1)))
        for _ in range(args.obstacles)
    ]
    spec = synth.SceneSpec(
        walkers=_scenario_walkers(args.scenario),
        floor_pattern=args.pattern,
        dirt_spots=dirt,
        obstacles=obstacles,
        n_frames=args.frames,
        rate=args.rate,
        robot_velocity=(args.robot_speed, 0.0),
    )
    scene = synth.generate_synthetic_scene(spec, seed=cfg.seed)
    scene.save(out)
    return {"frames": len(scene.frames), "walkers": len(spec.walkers), "out": str(out)}


# ---------------------------------------------------------------- training


def _human_centers(seq, t: float) -> np.ndarray:
    gt = seq.ground_truth or {}
    for fr in gt.get("frames", []):
        if abs(fr["timestamp"] - t) < 1e-9:
            return np.array([h["box"]["center"][:2] for h in fr["humans"]]).reshape(-1, 2)
    return np.zeros((0, 2))


def _leg_centers(seq, t: float) -> np.ndarray:
    gt = seq.ground_truth or {}
    for fr in gt.get("frames", []):
        if abs(fr["timestamp"] - t) < 1e-9:
            return np.array(fr.get("legs", [])).reshape(-1, 2)
    return np.zeros((0, 2))


def _require_gt(seq):
    if not seq.ground_truth:
        raise CliError(f"{seq.root}: sequence has no groundtruth.json")


def _cluster_dir(path: str) -> list[np.ndarray]:
    """Features of every cluster cloud file (``*.bin``) in a directory."""
    d = Path(path)
    if not d.is_dir():
        raise CliError(f"{d}: cluster directory not found")
    files = sorted(d.glob("*.bin"))
    if not files:
        raise CliError(f"{d}: no .bin cluster files")
    out = []
    for f in files:
        c = read_cloud(f)
        if len(c) == 0:
            raise CliError(f"{f}: empty cluster")
        out.append(features_from_points(c.xyz, c.intensity))
    return out


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        key, _, vals = item.partition("=")
        key = key.strip().lower()
        if key not in ("c", "gamma") or not vals:
            raise ConfigError(f"bad --grid entry {item!r}; expected c=... or gamma=...")
        try:
            grid[key] = tuple(float(v) for v in vals.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad --grid entry {item!r}") from exc
        if any(v <= 0 for v in grid[key]):
            raise ConfigError("grid values must be positive")
    return grid


def cmd_train_svm(cfg: PipelineConfig, args) -> dict:
    grid = _parse_grid(args.grid)
    cfg.svm.C_grid = grid.get("c", cfg.svm.C_grid)
    cfg.svm.gamma_grid = grid.get("gamma", cfg.svm.gamma_grid)
    if args.folds is not None:
        cfg.svm.folds = args.folds
    out = _outdir(cfg)
    if args.pos or args.neg:
        if not (args.pos and args.neg):
            raise CliError("--pos and --neg must be given together")
        P, N = _cluster_dir(args.pos), _cluster_dir(args.neg)
        X, y = np.array(P + N), np.array([1] * len(P) + [-1] * len(N))
    else:
        X, y = _sequence_clusters(cfg, args.stride)
    model = svm_train(X, y, cfg.svm.C_grid, cfg.svm.gamma_grid, cfg.svm.folds, cfg.seed)
    path = out / "svm_model.json"
    model.save(path)
    return {"model": str(path), "examples": len(y), "positives": int(np.sum(y > 0)), "C": model.C, "gamma": model.gamma}


def _sequence_clusters(cfg: PipelineConfig, stride: int):
    seq = _sequence(cfg)
    _require_gt(seq)
    p = cfg.clustering
    T_ext = seq.manifest.extrinsic(LIDAR_SENSOR)
    X, y = [], []
    for k, fr in enumerate(seq.frames([LIDAR_SENSOR])):
        if k % stride:
            continue
        cloud = candidates_cloud(fr.data, p)
        T = sensor_to_world(seq.pose_at(fr.timestamp), T_ext)
        humans = _human_centers(seq, fr.timestamp)
        for c in volumetric_filter(adaptive_cluster(cloud, p.rings, p.min_size, p.max_size)):
            xy = transform_points(T, np.asarray(c.centroid)[None])[0, :2]
            pos = len(humans) and np.min(np.linalg.norm(humans - xy, axis=1)) <= cfg.svm.label_radius
            X.append(extract_features(c, cloud))
            y.append(1 if pos else -1)
    if len(set(y)) < 2:
        raise CliError("training clusters contain only one class")
    return np.array(X), np.array(y)


def _scan_examples(seq, radius: float):
    X, y = [], []
    ext = seq.manifest.extrinsic(LASER_SENSOR)
    prev = None
    for fr in seq.frames([LASER_SENSOR]):
        scan: LaserScan2D = fr.data
        T = sensor_to_world(seq.pose_at(fr.timestamp), ext)
        legs = _leg_centers(seq, fr.timestamp)
        prev_pts = dt = None
        if prev is not None:
            prev_pts, dt = prev.points()[prev.valid()], scan.timestamp - prev.timestamp
        for s in segment_scan(scan):
            c = transform_points(T, np.array([[*s.centroid, 0.0]]))[0, :2]
            pos = len(legs) and np.min(np.linalg.norm(legs - c, axis=1)) <= radius
            X.append(segment_features(s, prev_pts, dt))
            y.append(1 if pos else -1)
        prev = scan
    return np.array(X), np.array(y)


def cmd_train_legs2d(cfg: PipelineConfig, args) -> dict:
    seq = _sequence(cfg)
    _require_gt(seq)
    out = _outdir(cfg)
    X, y = _scan_examples(seq, cfg.legs.label_radius)
    if len(set(y.tolist())) < 2:
        raise CliError("scan segments contain only one class")
    model = adaboost_train(X, y, cfg.legs.rounds)
    path = out / "legs2d_model.json"
    model.save(path)
    err = float(model.history["train_error"][-1])
    return {"model": str(path), "examples": int(len(y)), "positives": int(np.sum(y > 0)), "train_error": err}


# ---------------------------------------------------------------- detection


def run_detectors(cfg: PipelineConfig, seq):
    """Per-timestamp detections plus lidar human boxes for evaluation."""
    cfg.check_models()
    svm = SvmModel.load(cfg.svm.model) if Source.LIDAR3D.value in cfg.detectors else None
    ada = AdaBoostModel.load(cfg.legs.model) if Source.LASER_LEGS.value in cfg.detectors else None
    want = set()
    if svm:
        want.add(LIDAR_SENSOR)
    if ada:
        want.add(LASER_SENSOR)
    if Source.RGBD_LEGS.value in cfg.detectors:
        want.add(FRONT_SENSOR)

    by_t: dict[float, list[Detection]] = {}
    boxes = []
    negatives = 0
    prev_scan = None
    pending_front: dict[float, dict] = {}
    for fr in seq.frames(sorted(want)):
        t = fr.timestamp
        by_t.setdefault(t, [])
        pose = seq.pose_at(t)
        if fr.sensor == LIDAR_SENSOR and isinstance(fr.data, PointCloud3D):
            T = sensor_to_world(pose, seq.manifest.extrinsic(LIDAR_SENSOR))
            cloud = candidates_cloud(fr.data, cfg.clustering)
            frame_boxes = []
            for cand in classify_candidates(fr.data, svm, cfg.clustering):
                if cand.probability < cfg.svm.threshold:
                    negatives += 1
                    continue
                world = transform_points(T, cloud.xyz[cand.cluster.indices])
                c = world.mean(axis=0)
                by_t[t].append(Detection(c[:2], isotropic(LIDAR3D_SIGMA), Source.LIDAR3D, cand.probability, t))
                frame_boxes.append({**BoundingBox3D.from_points(world).to_dict(), "score": cand.probability})
            boxes.append({"timestamp": t, "boxes": frame_boxes})
        elif fr.sensor == LASER_SENSOR and isinstance(fr.data, LaserScan2D):
            ext = seq.manifest.extrinsic(LASER_SENSOR)
            by_t[t].extend(detect_legs_2d(fr.data, ada, cfg.legs.params, pose, ext, prev_scan))
            prev_scan = fr.data
        elif fr.sensor == FRONT_SENSOR:
            slot = pending_front.setdefault(t, {})
            slot["depth" if isinstance(fr.data, DepthFrame) else "rgb"] = fr.data
            if len(slot) == 2:
                cloud = register_rgbd(slot["depth"], slot["rgb"], seq.manifest.extrinsic(FRONT_SENSOR))
                by_t[t].extend(detect_legs_rgbd(cloud, cfg.legs.params, pose))
                del pending_front[t]
    frames = [(t, by_t[t]) for t in sorted(by_t)]
    return frames, {"frames": boxes, "negatives": negatives}


def cmd_detect(cfg: PipelineConfig, args) -> dict:
    seq = _sequence(cfg)
    out = _outdir(cfg)
    frames, boxes = run_detectors(cfg, seq)
    _dump(out / "detections.json", {"frames": [{"timestamp": t, "detections": [d.to_dict() for d in ds]} for t, ds in frames]})
    _dump(out / "boxes.json", boxes)
    return {"frames": len(frames), "detections": sum(len(ds) for _, ds in frames)}


def _load_detections(path: Path):
    try:
        doc = json.loads(path.read_text())
        return [(float(f["timestamp"]), [Detection.from_dict(d) for d in f["detections"]]) for f in doc["frames"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: malformed detections file ({exc})") from exc


def cmd_track(cfg: PipelineConfig, args) -> dict:
    out = _outdir(cfg)
    src = Path(cfg.input or "")
    if src.is_file():
        frames = _load_detections(src)
    else:
        frames, _ = run_detectors(cfg, _sequence(cfg))
    tracker = Tracker(cfg.tracker)
    ids = set()
    with open(out / "tracks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_CSV_HEADER)
        for t, dets in frames:
            snaps = tracker.step(dets, t)
            ids.update(s.id for s in snaps)
            for row in track_rows(snaps):
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return {"frames": len(frames), "confirmed_ids": len(ids)}


# ---------------------------------------------------------------- floor camera


def _floor_pairs(seq):
    pending: dict[float, dict] = {}
    for fr in seq.frames([FLOOR_SENSOR]):
        slot = pending.setdefault(fr.timestamp, {})
        slot["depth" if isinstance(fr.data, DepthFrame) else "rgb"] = fr.data
        if len(slot) == 2:
            del pending[fr.timestamp]
            yield fr.timestamp, slot["depth"], slot.get("rgb")


def cmd_objects(cfg: PipelineConfig, args) -> dict:
    seq = _sequence(cfg)
    out = _outdir(cfg)
    (out / "masks").mkdir(exist_ok=True)
    ext = seq.manifest.extrinsic(FLOOR_SENSOR)
    frames, skipped = [], 0
    for k, (t, depth, _) in enumerate(_floor_pairs(seq)):
        try:
            floor, _ = fit_floor(depth, cfg.object.noise, cfg.object.params)
        except NoFloorError as exc:
            log.warning("t=%s: %s", t, exc)
            skipped += 1
            continue
        obstacle, floor_mask, boxes, counts = detect_objects(depth, floor, cfg.object.noise, cfg.object.params)
        Image.fromarray(mask_png(obstacle, floor_mask)).save(out / "masks" / f"{k:06d}.png")
        xyz, valid = depth.backproject()
        T = sensor_to_world(seq.pose_at(t), ext)
        world = transform_points(T, xyz)
        pix = np.full(valid.shape, -1)
        pix[valid] = np.arange(len(xyz))
        labels, _ = ndimage.label(obstacle, structure=np.ones((3, 3), dtype=int))
        wboxes = []
        for lab in range(1, labels.max() + 1):
            sel = pix[labels == lab]
            wboxes.append({**BoundingBox3D.from_points(world[sel]).to_dict(), "pixels": int(len(sel))})
        frames.append({"timestamp": t, "boxes": wboxes, "camera_boxes": [b.to_dict() for b in boxes]})
    _dump(out / "objects.json", {"frames": frames})
    return {"frames": len(frames), "skipped": skipped, "objects": sum(len(f["boxes"]) for f in frames)}


def cmd_dirt(cfg: PipelineConfig, args) -> dict:
    seq = _sequence(cfg)
    out = _outdir(cfg)
    (out / "dirt").mkdir(exist_ok=True)
    ext = seq.manifest.extrinsic(FLOOR_SENSOR)
    cell = cfg.analytics.cell
    median = TemporalMedianFilter(cfg.dirt.window)
    observations = []
    scores_out = {}
    n = 0
    for k, (t, depth, rgb) in enumerate(_floor_pairs(seq)):
        try:
            floor, _ = fit_floor(depth, cfg.object.noise, cfg.object.params)
        except NoFloorError as exc:
            log.warning("t=%s: %s", t, exc)
            continue
        obstacle, floor_mask, _, _ = detect_objects(depth, floor, cfg.object.noise, cfg.object.params)
        pix, scores, grid = detect_dirt(rgb, floor_mask, obstacle, cfg.dirt)
        Image.fromarray(pix.astype(np.uint8) * 255).save(out / "dirt" / f"mask_{k:06d}.png")
        scores_out[f"{k:06d}"] = scores
        n += 1

        # Per world cell: dirty if any valid block centered in it is dirty.
        b = cfg.dirt.block
        rows, cols = np.nonzero(grid.valid)
        if len(rows) == 0:
            continue
        v = rows * b + b // 2
        u = cols * b + b // 2
        z = depth.depth[v, u]
        ok = z > 0
        K = depth.intrinsics
        cam = np.column_stack([(u[ok] - K.cx) * z[ok] / K.fx, (v[ok] - K.cy) * z[ok] / K.fy, z[ok]])
        world = transform_points(sensor_to_world(seq.pose_at(t), ext), cam)[:, :2]
        dirty = pix[v[ok], u[ok]]
        cells: dict = {}
        for (x, y), d in zip(world, dirty):
            key = (int(np.floor(x / cell)), int(np.floor(y / cell)))
            cells[key] = max(cells.get(key, 0.0), float(d))
        emitted = median.update(cells)
        if emitted:
            keys = sorted(emitted)
            xy = np.array([[(i + 0.5) * cell, (j + 0.5) * cell] for i, j in keys])
            observations.append((xy, np.array([emitted[c] for c in keys])))
    np.savez_compressed(out / "dirt_scores.npz", **scores_out)
    grid = analytics.dirt_heatmap(observations, cell)
    grid.to_png(out / "dirt_heatmap.png")
    grid.to_csv(out / "dirt_heatmap.csv")
    return {"frames": n, "observed_cells": int(grid.observed.sum()), "dirty_cells": int((grid.counts > 0).sum())}


# ---------------------------------------------------------------- evaluation


def cmd_evaluate(cfg: PipelineConfig, args) -> dict:
    seq = _sequence(cfg)
    _require_gt(seq)
    out = _outdir(cfg)
    result = {}
    if args.predictions:
        p = Path(args.predictions)
        if not p.is_file():
            raise CliError(f"{p}: predictions file not found")
        try:
            doc = json.loads(p.read_text())
            pred = {round(float(f["timestamp"]), 9): f["boxes"] for f in doc["frames"]}
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{p}: malformed predictions ({exc})") from exc
        frames = []
        for fr in seq.ground_truth.get("frames", []):
            gts = [BoundingBox3D.from_dict(h["box"]) for h in fr["humans"]]
            boxes = pred.get(round(float(fr["timestamp"]), 9), [])
            frames.append(([BoundingBox3D.from_dict(b) for b in boxes], [float(b.get("score", 1.0)) for b in boxes], gts))
        result["detection"] = analytics.detection_metrics(frames, cfg.analytics.iou_threshold, doc.get("negatives"))
    if args.dirt:
        scores_path = Path(args.dirt) / "dirt_scores.npz"
        if not scores_path.is_file():
            raise CliError(f"{scores_path}: dirt scores not found (run the dirt command first)")
        data = np.load(scores_path)
        s_all, y_all = [], []
        for key in sorted(data.files):
            mask_file = Path(seq.root) / "gt" / f"dirt_{key}.png"
            if not mask_file.is_file():
                raise CliError(f"{mask_file}: ground-truth dirt mask missing")
            scores = data[key]
            labels = analytics.block_labels(np.asarray(Image.open(mask_file)) > 0, cfg.dirt.block)[: scores.shape[0], : scores.shape[1]]
            ok = np.isfinite(scores)
            s_all.append(-scores[ok])  # low likelihood = dirty
            y_all.append(labels[ok])
        fpr, tpr = analytics.roc_points(np.concatenate(s_all), np.concatenate(y_all))
        with open(out / "roc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr"])
            w.writerows([[repr(float(a)), repr(float(b))] for a, b in zip(fpr, tpr)])
        result["dirt_auc"] = analytics.auc(fpr, tpr)
    if not result:
        raise CliError("nothing to evaluate: give --predictions and/or --dirt")
    _dump(out / "metrics.json", result)
    return result


def _read_tracks(path: Path):
    if path.is_dir():
        path = path / "tracks.csv"
    if not path.is_file():
        raise CliError(f"{path}: tracks file not found")
    trajs: dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                trajs.setdefault(int(row["id"]), []).append((float(row["timestamp"]), float(row["x"]), float(row["y"])))
            except (KeyError, ValueError) as exc:
                raise CliError(f"{path}: malformed track row {row}") from exc
    return [np.array(sorted(v))[:, 1:] for _, v in sorted(trajs.items())]


def cmd_heatmap(cfg: PipelineConfig, args) -> dict:
    if not cfg.input:
        raise CliError("--input is required")
    out = _outdir(cfg)
    trajs = _read_tracks(Path(cfg.input))
    grid = analytics.trajectory_heatmap(trajs, cfg.analytics.cell, mode=cfg.analytics.heatmap_mode)
    grid.to_png(out / "heatmap.png")
    grid.to_csv(out / "heatmap.csv")
    return {"trajectories": len(trajs), "shape": list(grid.shape)}


COMMANDS = {
    "synth": cmd_synth,
    "train-svm": cmd_train_svm,
    "train-legs2d": cmd_train_legs2d,
    "detect": cmd_detect,
    "track": cmd_track,
    "dirt": cmd_dirt,
    "objects": cmd_objects,
    "evaluate": cmd_evaluate,
    "heatmap": cmd_heatmap,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--input", help="sequence directory or input file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--detectors", help="comma-separated: lidar3d,rgbd_legs,laser_legs")
    common.add_argument("--svm-model", help="SVM model file (overrides svm.model)")
    common.add_argument("--legs-model", help="2D leg model file (overrides legs.model)")

    p = _Parser(prog="scrubber", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic sequence")
    s.add_argument("--scenario", default="crossing", choices=["crossing", "single", "static", "empty"])
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--rate", type=float, default=10.0)
    s.add_argument("--pattern", default="tiles", choices=["tiles", "plain", "speckle"])
    s.add_argument("--dirt", type=int, default=3, help="number of dirt spots")
    s.add_argument("--obstacles", type=int, default=1)
    s.add_argument("--robot-speed", type=float, default=0.0)
    t = sub.add_parser("train-svm", parents=[common], help="train the lidar human classifier")
    t.add_argument("--stride", type=int, default=1, help="use every n-th lidar frame")
    t.add_argument("--pos", help="directory of human cluster clouds (*.bin)")
    t.add_argument("--neg", help="directory of non-human cluster clouds (*.bin)")
    t.add_argument("--folds", type=int, help="cross-validation folds")
    t.add_argument("--grid", nargs="*", help="search grid, e.g. c=0.1,1,10 gamma=0.01,0.1,1")
    sub.add_parser("train-legs2d", parents=[common], help="train the 2D laser leg classifier")
    sub.add_parser("detect", parents=[common], help="per-frame detections JSON")
    sub.add_parser("track", parents=[common], help="tracks CSV from a sequence or detections.json")
    sub.add_parser("dirt", parents=[common], help="dirt masks and dirt heatmap")
    sub.add_parser("objects", parents=[common], help="floor obstacle boxes JSON")
    e = sub.add_parser("evaluate", parents=[common], help="detection metrics and dirt ROC")
    e.add_argument("--predictions", help="boxes JSON (as written by detect)")
    e.add_argument("--dirt", help="output directory of the dirt command")
    sub.add_parser("heatmap", parents=[common], help="trajectory heatmap from tracks CSV")
    return p


def _effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg.seed = args.seed
    if args.input:
        cfg.input = args.input
    if args.out:
        cfg.out = args.out
    if args.detectors:
        cfg.detectors = tuple(d.strip() for d in args.detectors.split(",") if d.strip())
        cfg.check_detectors()
    if args.svm_model:
        cfg.svm.model = args.svm_model
    if args.legs_model:
        cfg.legs.model = args.legs_model
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("SCRUBBER_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        summary = COMMANDS[args.command](cfg, args)
        if cfg.out:
            # the file sits in the output directory, so leave that path out and keep reruns byte-identical
            _dump(Path(cfg.out) / "config.json", {**cfg.to_dict(), "out": None})
    except ConfigError as exc:
        _fail("config", str(exc), 2)
    except (CliError, SequenceError, FileNotFoundError) as exc:
        _fail("input", str(exc), 2)
    except (ValueError, NoFloorError) as exc:
        _fail("runtime", str(exc), 1)
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
