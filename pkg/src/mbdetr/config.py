"""Pipeline configuration: one JSON document with a section per stage."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .criterion import LossWeights
from .detector import DetectorConfig
from .renderer import RenderConfig
from .simulator import PSFModel, SceneSpec

ENV_CONFIG = "MBDETR_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulateSection:
    n_frames: int = 600
    previews: bool = False
    scene: SceneSpec = field(default_factory=SceneSpec)


@dataclass(frozen=True)
class SplitSection:
    test_size: int = 100
    threshold: float = 0.18


@dataclass(frozen=True)
class LossSection:
    weights: LossWeights = field(default_factory=LossWeights)
    aux: bool = True


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 4e-4
    lr_drop: float = 0.8
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    augment: bool = True
    scale_range: tuple[float, float] = (0.8, 1.2)
    val_every: int = 1


@dataclass(frozen=True)
class InferSection:
    threshold: float = 0.5
    band: float = 4.0
    radius: float = 3.0
    batch_size: int = 8


@dataclass(frozen=True)
class EvalSection:
    distance_tolerance: float = 1.0
    max_detections: int = 100


@dataclass(frozen=True)
class RenderSection:
    factor: int = 8
    sigma: float = 1.0
    gamma: float = 0.5
    colormap: str = "afmhot"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 1
    threads: int = 1
    simulate: SimulateSection = field(default_factory=SimulateSection)
    split: SplitSection = field(default_factory=SplitSection)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    infer: InferSection = field(default_factory=InferSection)
    evaluate: EvalSection = field(default_factory=EvalSection)
    render: RenderSection = field(default_factory=RenderSection)

    def validate(self) -> "PipelineConfig":
        checks = [
            (self.threads >= 1, "threads must be >= 1"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.simulate.n_frames >= 1, "simulate.n_frames must be >= 1"),
            (self.split.test_size >= 0, "split.test_size must be >= 0"),
            (0 < self.split.threshold <= 1, "split.threshold must be in (0, 1]"),
            (self.train.epochs >= 0, "train.epochs must be >= 0"),
            (self.train.batch_size >= 1, "train.batch_size must be >= 1"),
            (self.train.lr > 0, "train.lr must be > 0"),
            (0 < self.train.lr_drop <= 1, "train.lr_drop must be in (0, 1]"),
            (self.train.weight_decay >= 0, "train.weight_decay must be >= 0"),
            (self.train.grad_clip >= 0, "train.grad_clip must be >= 0 (0 disables)"),
            (0 < self.train.scale_range[0] <= self.train.scale_range[1], "train.scale_range must be increasing and positive"),
            (self.train.val_every >= 0, "train.val_every must be >= 0"),
            (0 < self.infer.threshold < 1, "infer.threshold must be in (0, 1)"),
            (self.infer.band >= 0, "infer.band must be >= 0"),
            (self.infer.radius > 0, "infer.radius must be > 0"),
            (self.infer.batch_size >= 1, "infer.batch_size must be >= 1"),
            (self.evaluate.distance_tolerance > 0, "evaluate.distance_tolerance must be > 0"),
            (self.evaluate.max_detections >= 1, "evaluate.max_detections must be >= 1"),
            (self.render.factor >= 1, "render.factor must be >= 1"),
            (self.render.sigma > 0, "render.sigma must be > 0"),
            (self.render.gamma > 0, "render.gamma must be > 0"),
            (all(w >= 0 for w in dataclasses.astuple(self.loss.weights)), "loss weights must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.simulate.scene.validate()
            self.detector.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        ph, pw = self.simulate.scene.height // 2, self.simulate.scene.width // 2
        if tuple(self.detector.input_size) != (ph, pw):
            raise ConfigError(f"detector.input_size {self.detector.input_size} must equal the patch size {(ph, pw)}")
        if self.detector.queries <= self.simulate.scene.max_bubbles:
            raise ConfigError("detector.queries must exceed the most bubbles a patch can hold (scene.max_bubbles)")
        import matplotlib

        if self.render.colormap not in matplotlib.colormaps:
            raise ConfigError(f"unknown colormap {self.render.colormap!r}")
        return self

    def render_config(self) -> RenderConfig:
        s = self.simulate.scene
        return RenderConfig(s.width, s.height, self.render.factor, self.render.sigma)

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


_NESTED = {
    PipelineConfig: {"simulate": SimulateSection, "split": SplitSection, "detector": DetectorConfig,
                     "loss": LossSection, "train": TrainSection, "infer": InferSection,
                     "evaluate": EvalSection, "render": RenderSection},
    SimulateSection: {"scene": SceneSpec},
    SceneSpec: {"psf": PSFModel},
    LossSection: {"weights": LossWeights},
}
_TUPLES = {"radius_range", "speed_range", "input_size", "backbone_channels", "scale_range"}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        sub = _NESTED.get(cls, {}).get(key)
        if sub is not None:
            kwargs[key] = _build(sub, value, path)
            continue
        default = getattr(cls(), key) if _has_defaults(cls) else None
        kwargs[key] = _coerce(value, default, path)
    return cls(**kwargs)


def _has_defaults(cls) -> bool:
    return all(f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
               for f in dataclasses.fields(cls))


def _coerce(value, default, path: str):
    key = path.rsplit(".", 1)[-1]
    if key in _TUPLES:
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError(f"{path} must be a 2-element list")
        return tuple(_coerce(v, default[0] if default else None, path + "[]") for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string")
    return value


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a config file (or ``$MBDETR_CONFIG``, or defaults) and apply dotted overrides."""
    data: dict = {}
    path = path or os.environ.get(ENV_CONFIG)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return _build(PipelineConfig, data, "").validate()


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "").validate()
