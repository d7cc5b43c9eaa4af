"""
DCMNet Run Configuration

A run is described by a preset, an optional JSON file and command-line flags, applied in that
order (flags win). File schema:

    {
      "preset": "desk",
      "model": {"components": 10, "routing": {"channels": 16, "router_mode": "soft"}},
      "train": {"epochs": 200, "learning_rate": 0.001},
      "paths": {"dataset": "scene.dynf", "checkpoint": "model.dynm", "report_dir": "out"}
    }

Unknown keys at any level are rejected.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig, preset
from .preprocessing import SceneCube
from .training import TrainConfig

DEFAULT_PRESET = "desk"
TOP_LEVEL_KEYS = {"preset", "model", "train", "paths"}


@dataclass(frozen=True)
class PathsConfig:
    dataset: str | None = None
    checkpoint: str | None = None
    report_dir: str | None = None


@dataclass(frozen=True)
class RunConfig:
    preset: str = DEFAULT_PRESET
    model: ModelConfig = field(default_factory=lambda: preset(DEFAULT_PRESET))
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "paths": dataclasses.asdict(self.paths),
        }


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(document) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return document


def _drop_unset(values: dict | None) -> dict:
    return {k: v for k, v in (values or {}).items() if v is not None}


def load_run_config(
    path: str | Path | None = None,
    preset_name: str | None = None,
    model_overrides: dict | None = None,
    train_overrides: dict | None = None,
    path_overrides: dict | None = None,
    default_preset: str = DEFAULT_PRESET,
) -> RunConfig:
    """
    Resolve preset < file < flags into one RunConfig.

    Override dicts map field names to values; ``None`` values mean "flag not given". Model
    overrides may name routing fields directly (``channels``, ``router_mode``, ...).

    Raises:
        ConfigError: On unknown keys, bad values or an unreadable file
    """
    document = read_config_file(path) if path is not None else {}
    chosen = preset_name or document.get("preset") or default_preset
    try:
        model = ModelConfig.from_dict(document.get("model", {}), base=preset(chosen))
        model = model.replace(**_drop_unset(model_overrides))
        train = TrainConfig.from_dict(document.get("train", {}))
        train = dataclasses.replace(train, **_drop_unset(train_overrides))
        paths_doc = document.get("paths", {})
        unknown = set(paths_doc) - {f.name for f in dataclasses.fields(PathsConfig)}
        if unknown:
            raise ConfigError(f"unknown paths keys: {sorted(unknown)}")
        paths = dataclasses.replace(PathsConfig(**paths_doc), **_drop_unset(path_overrides))
    except (TypeError, AttributeError) as e:
        raise ConfigError(f"invalid configuration value: {e}") from e
    return RunConfig(preset=chosen, model=model, train=train, paths=paths)


def fit_to_dataset(model: ModelConfig, cube: SceneCube) -> ModelConfig:
    """Take band count, LiDAR channels and class count from the dataset."""
    return model.replace(
        bands=cube.bands, lidar_channels=cube.lidar_channels, num_classes=cube.num_classes
    )
