"""Pipeline configuration: one JSON document with a section per stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .clustering import ClusteringParams
from .dirt import DirtParams
from .legs import LegParams
from .objects import NoiseModel, ObjectParams
from .tracking import TrackerConfig
from .types import Source

DETECTORS = (Source.LIDAR3D.value, Source.RGBD_LEGS.value, Source.LASER_LEGS.value)


class ConfigError(ValueError):
    pass


@dataclass
class SvmSection:
    model: str | None = None
    threshold: float = 0.5
    C_grid: tuple = (0.1, 1.0, 10.0, 100.0)
    gamma_grid: tuple = (0.001, 0.01, 0.1, 1.0)
    folds: int = 5
    label_radius: float = 0.4


@dataclass
class LegsSection:
    params: LegParams = field(default_factory=LegParams)
    model: str | None = None
    rounds: int = 50
    label_radius: float = 0.1


@dataclass
class ObjectSection:
    params: ObjectParams = field(default_factory=ObjectParams)
    noise: NoiseModel = field(default_factory=NoiseModel)


@dataclass
class AnalyticsSection:
    cell: float = 0.2
    iou_threshold: float = 0.5
    heatmap_mode: str = "trajectories"


@dataclass
class PipelineConfig:
    clustering: ClusteringParams = field(default_factory=ClusteringParams)
    svm: SvmSection = field(default_factory=SvmSection)
    legs: LegsSection = field(default_factory=LegsSection)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    object: ObjectSection = field(default_factory=ObjectSection)
    dirt: DirtParams = field(default_factory=DirtParams)
    analytics: AnalyticsSection = field(default_factory=AnalyticsSection)
    input: str | None = None
    out: str | None = None
    detectors: tuple = DETECTORS
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {"clustering", "svm", "legs", "tracker", "object", "dirt", "analytics", "input", "out", "detectors", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            legs = dict(d.get("legs", {}))
            obj = dict(d.get("object", {}))
            svm = dict(d.get("svm", {}))
            for k in ("C_grid", "gamma_grid"):
                if k in svm:
                    svm[k] = tuple(svm[k])
            cfg = cls(
                clustering=ClusteringParams.from_dict(d.get("clustering", {})),
                svm=SvmSection(**svm),
                legs=LegsSection(
                    LegParams.from_dict(legs.pop("params", {})),
                    **legs,
                ),
                tracker=TrackerConfig.from_dict(d.get("tracker", {})),
                object=ObjectSection(ObjectParams.from_dict(obj.get("params", {})), NoiseModel(**obj.get("noise", {}))),
                dirt=DirtParams.from_dict(d.get("dirt", {})),
                analytics=AnalyticsSection(**d.get("analytics", {})),
                input=d.get("input"),
                out=d.get("out"),
                detectors=tuple(d.get("detectors", DETECTORS)),
                seed=int(d.get("seed", 0)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.check_detectors()
        return cfg

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {
            "clustering": self.clustering.to_dict(),
            "svm": {**asdict(self.svm), "C_grid": list(self.svm.C_grid), "gamma_grid": list(self.svm.gamma_grid)},
            "legs": {"params": self.legs.params.to_dict(), "model": self.legs.model, "rounds": self.legs.rounds, "label_radius": self.legs.label_radius},
            "tracker": self.tracker.to_dict(),
            "object": {"params": self.object.params.to_dict(), "noise": asdict(self.object.noise)},
            "dirt": self.dirt.to_dict(),
            "analytics": asdict(self.analytics),
            "input": self.input,
            "out": self.out,
            "detectors": list(self.detectors),
            "seed": self.seed,
        }

    def check_detectors(self) -> None:
        bad = set(self.detectors) - set(DETECTORS)
        if bad:
            raise ConfigError(f"unknown detectors: {sorted(bad)}")

    def check_models(self) -> None:
        """Model files must exist for every enabled learned detector."""
        need = {Source.LIDAR3D.value: ("svm.model", self.svm.model), Source.LASER_LEGS.value: ("legs.model", self.legs.model)}
        for det in self.detectors:
            if det not in need:
                continue
            key, path = need[det]
            if not path:
                raise ConfigError(f"detector {det} is enabled but {key} is not set")
            if not Path(path).is_file():
                raise ConfigError(f"{key}: model file {path} does not exist")


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: config file not found")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return PipelineConfig.from_dict(raw)
