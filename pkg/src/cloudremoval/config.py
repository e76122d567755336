"""Pipeline configuration: one YAML file, validated before any work starts."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .cloudsim import CloudSimConfig
from .embed.tsne import TsneConfig
from .mcgan.training import ModelConfig, TrainConfig

DATA_ROOT_ENV = "CLOUDREMOVAL_DATA_ROOT"
RESOLVED_NAME = "resolved_config.yaml"


class ConfigError(ValueError):
    pass


@dataclass
class RasterConfig:
    tile_side: int = 256
    stride: int = 256

    def validate(self) -> None:
        if self.tile_side < 1 or self.stride < 1:
            raise ValueError("raster tile_side and stride must be >= 1")


@dataclass
class SynthConfig(CloudSimConfig):
    group_count: int | None = 5000
    reference_scene: str | None = None  # RGB raster whose stats anchor color correction


@dataclass
class EmbedConfig:
    extractor: str = "alexnet"
    weights: str | None = None
    grid_size: int = 45
    sample_count: int = 2000
    seed: int = 0
    restrict_training: bool = True  # train only on the selected groups when a selection exists
    tsne: TsneConfig = field(default_factory=TsneConfig)

    def validate(self) -> None:
        if self.extractor not in ("alexnet", "histogram"):
            raise ValueError(f"unknown extractor {self.extractor!r}")
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")
        self.tsne.validate()


@dataclass
class SceneEntry:
    id: str
    rgb: str  # RGB, or RGBN when nir is omitted
    nir: str | None = None
    valid_mask: str | None = None


@dataclass
class PathsConfig:
    out: str = "runs"
    scenes: list[SceneEntry] = field(default_factory=list)
    synthetic_scenes: int = 1  # used when no scenes are listed
    synthetic_scene_size: int = 512
    dataset_root: str | None = None
    selection: str | None = None
    checkpoints: str | None = None
    reports: str | None = None

    def resolve(self, name: str) -> Path:
        defaults = {"dataset_root": "dataset", "selection": "sample/selection.json",
                    "checkpoints": "checkpoints", "reports": "reports"}
        value = getattr(self, name)
        if name == "dataset_root" and os.environ.get(DATA_ROOT_ENV):
            value = os.environ[DATA_ROOT_ENV]
        return Path(value) if value else Path(self.out) / defaults[name]


@dataclass
class PipelineConfig:
    raster: RasterConfig = field(default_factory=RasterConfig)
    cloudsim: SynthConfig = field(default_factory=SynthConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        try:
            self.raster.validate()
            self.cloudsim.validate()
            self.embed.validate()
            self.train.validate()
            if self.paths.synthetic_scenes < 0:
                raise ValueError("synthetic_scenes must be >= 0")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def set_seed(self, seed: int) -> None:
        self.cloudsim.seed = seed
        self.embed.seed = seed
        self.embed.tsne.seed = seed
        self.train.seed = seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(_plain(self.to_dict()), sort_keys=False))
        return path


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_NESTED = {
    PipelineConfig: {"raster": RasterConfig, "cloudsim": SynthConfig, "embed": EmbedConfig,
                     "train": TrainConfig, "paths": PathsConfig},
    EmbedConfig: {"tsne": TsneConfig},
    TrainConfig: {"model": ModelConfig},
}


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    for key, sub in _NESTED.get(cls, {}).items():
        if key in data:
            if not isinstance(data[key], dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            data[key] = _build(sub, data[key], f"{where}{key}.")
    if cls is PathsConfig and "scenes" in data:
        data["scenes"] = [_build(SceneEntry, s, f"{where}scenes.") for s in data["scenes"] or []]
    for key in ("thresholds", "clip_percentiles", "cloud_color"):
        if isinstance(data.get(key), list):
            data[key] = tuple(data[key])
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict | None) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)
