"""Strict YAML run configuration: one structured file drives every subcommand.

Unknown keys are rejected with the offending dotted key path and file name.
Every run writes back its fully-resolved config for reproducibility.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .synth import CohortSpec
from .training import TrainConfig

SWEEP_AXES = (
    "hidden_dim",
    "num_layers",
    "use_cls_token",
    "prediction_weight",
    "fcm_mask_prob",
    "noise_aug_scale",
    "positional",
    "pretrain",
)


@dataclass
class EmbedConfig:
    checkpoint: str | None = None
    dataset: str | None = None


@dataclass
class ProbeConfig:
    embeddings: str | None = None
    dataset: str | None = None
    outer_folds: int = 3
    inner_folds: int = 4
    l1_low: float = 1e-6
    l1_high: float = 1e-3
    l1_count: int = 7
    tasks: list[str] = field(
        default_factory=lambda: ["stroke_vs_control", "llpu_vs_control", "laterality"]
    )
    seed: int | None = None  # None = inherit the run's global seed

    def validate(self) -> None:
        if self.outer_folds < 2 or self.inner_folds < 2:
            raise ConfigError("probe.outer_folds and probe.inner_folds must be >= 2")
        if not (0 < self.l1_low <= self.l1_high):
            raise ConfigError("probe l1 grid needs 0 < l1_low <= l1_high")
        if self.l1_count < 1:
            raise ConfigError("probe.l1_count must be >= 1")


@dataclass
class SimmatrixConfig:
    embeddings: str | None = None
    dataset: str | None = None


@dataclass
class BiomarkerConfig:
    embeddings: str | None = None
    dataset: str | None = None
    reference: str = "per_trial"  # or per_subject_mean
    overlap: str = "forbid"  # or allow
    series_diagnoses: list[str] = field(default_factory=lambda: ["stroke", "prosthesis"])

    def validate(self) -> None:
        if self.reference not in ("per_trial", "per_subject_mean"):
            raise ConfigError("biomarker.reference must be per_trial or per_subject_mean")
        if self.overlap not in ("forbid", "allow"):
            raise ConfigError("biomarker.overlap must be forbid or allow")


@dataclass
class SweepConfig:
    axes: dict[str, list] = field(default_factory=dict)
    pretrain_dataset: str | None = None
    pretrain_epochs: int | None = None

    def validate(self) -> None:
        if not self.axes:
            raise ConfigError("sweep.axes must declare at least one axis")
        for key, values in self.axes.items():
            if key not in SWEEP_AXES:
                raise ConfigError(f"sweep axis '{key}' not supported (choose from {', '.join(SWEEP_AXES)})")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep axis '{key}' must list at least one value")
        if "pretrain" in self.axes and any(self.axes["pretrain"]) and not self.pretrain_dataset:
            raise ConfigError("sweep with pretrain=true needs sweep.pretrain_dataset")


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str | None = None
    cohort: CohortSpec | None = None
    model: ModelConfig | None = None
    train: TrainConfig | None = None
    pretrain: TrainConfig | None = None
    embed: EmbedConfig | None = None
    probe: ProbeConfig | None = None
    simmatrix: SimmatrixConfig | None = None
    biomarker: BiomarkerConfig | None = None
    sweep: SweepConfig | None = None


def _coerce(hint, value, file: str, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, file, where)
    if dataclasses.is_dataclass(hint):
        return build_dataclass(hint, value, file=file, where=where)
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ConfigError(f"key '{where}' in {file} must be a list")
        (item_type,) = typing.get_args(hint) or (str,)
        return [_coerce(item_type, v, file, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin in (tuple, typing.Tuple):
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"key '{where}' in {file} must be a {len(args)}-element list")
        return tuple(_coerce(a, v, file, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"key '{where}' in {file} must be a mapping")
        return dict(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"key '{where}' in {file} must be a boolean")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{where}' in {file} must be an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{where}' in {file} must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"key '{where}' in {file} must be a string")
        return value
    return value


def build_dataclass(cls, data, *, file: str, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{where}' in {file} must be a mapping")
    hints = typing.get_type_hints(cls)
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in field_map:
            raise ConfigError(f"unknown config key '{where}.{key}' in {file}")
    kwargs = {}
    for name, f in field_map.items():
        if name in data:
            kwargs[name] = _coerce(hints[name], data[name], file, f"{where}.{name}")
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"missing required config key '{where}.{name}' in {file}")
    return cls(**kwargs)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    file = str(path)
    hints = typing.get_type_hints(RunConfig)
    field_map = {f.name: f for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in field_map:
            raise ConfigError(f"unknown config key '{key}' in {file}")
    kwargs = {}
    for name in field_map:
        if name in data:
            kwargs[name] = _coerce(hints[name], data[name], file, name)
    return RunConfig(**kwargs)


def dump_resolved_config(config: RunConfig, path) -> None:
    def clean(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {k: clean(v) for k, v in dataclasses.asdict(value).items()}
        if isinstance(value, tuple):
            return [clean(v) for v in value]
        if isinstance(value, dict):
            return {k: clean(v) for k, v in value.items()}
        if isinstance(value, list):
            return [clean(v) for v in value]
        return value

    payload = {k: clean(v) for k, v in dataclasses.asdict(config).items() if v is not None}
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        yaml.safe_dump(payload, fh, sort_keys=True)
