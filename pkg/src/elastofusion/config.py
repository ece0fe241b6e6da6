"""Declarative run configuration.

A run is described by a YAML document with five sections (``data``,
``model``, ``train``, ``eval``, ``io``) plus a top-level ``seed``. Values are
merged in the order file < environment < command-line flags. Environment
overrides use ``ELASTOFUSION_<SECTION>__<KEY>`` (for example
``ELASTOFUSION_TRAIN__MAX_EPOCHS=8``); ``ELASTOFUSION_WEIGHTS_DIR`` sets the
pretrained-weight cache directory.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Any, Literal, Mapping

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .backbones import WEIGHTS_ENV
from .core import Modality
from .errors import ConfigError
from .training import MODEL_CHOICES, TrainConfig

ENV_PREFIX = "ELASTOFUSION_"
SNAPSHOT_NAME = "config.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SynthSection(_Section):
    n_patients: int = Field(40, ge=2)
    images_per_patient: tuple[int, int] = (3, 5)
    class_balance: float = Field(0.5, gt=0, lt=1)
    signal: Literal["gray", "color", "both"] = "both"
    image_size: int = Field(224, ge=32)
    roi_margin: float = Field(0.15, ge=0)


class DataSection(_Section):
    manifest: str | None = None
    synth: SynthSection = SynthSection()
    test_fraction: float = Field(0.25, gt=0, lt=1)
    n_folds: int = Field(5, ge=2)


def _model_id(v: str) -> str:
    v = v.lower()
    v = "resnet18" if v == "resnet" else v
    if v not in MODEL_CHOICES:
        raise ValueError(f"unknown model {v!r}; choose from {MODEL_CHOICES}")
    return v


class ModelSection(_Section):
    name: str = "ensemble"
    compare: list[str] = Field(default_factory=list)
    freeze_policy: str = "default"
    inflation: Literal["zero", "mean"] = "zero"
    weights: str = "auto"

    @field_validator("name")
    @classmethod
    def _check_name(cls, v: str) -> str:
        return _model_id(v)

    @field_validator("compare")
    @classmethod
    def _check_compare(cls, v: list[str]) -> list[str]:
        return [_model_id(x) for x in v]


class TrainSection(_Section):
    max_epochs: int | None = Field(None, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    batch_size: int = Field(16, ge=1)
    patience: int | None = Field(None, ge=1)
    min_delta: float = Field(0.0, ge=0)
    modality: Literal["b", "se", "bse"] = "bse"
    crop: bool = False
    augment: bool = True
    head_epochs: int | None = Field(None, ge=1)
    cache_frozen: bool = True

    @field_validator("modality", mode="before")
    @classmethod
    def _lower(cls, v):
        return v.lower() if isinstance(v, str) else v


class EvalSection(_Section):
    granularity: Literal["image", "patient", "both"] = "both"
    formats: list[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])
    modalities: list[Literal["b", "se", "bse"]] = Field(default_factory=list)
    crops: list[bool] = Field(default_factory=list)
    voting: bool = True


class IOSection(_Section):
    run_dir: str = "runs/latest"
    data_dir: str = "data/synthetic"
    cache_dir: str | None = None


class RunConfig(_Section):
    seed: int = 0
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    io: IOSection = IOSection()

    def train_config(self, **overrides: Any) -> TrainConfig:
        """Build the training settings; ``max_epochs`` must be set somewhere."""
        t = self.train.model_dump()
        t.update(overrides)
        if t["max_epochs"] is None:
            raise ConfigError("train.max_epochs is required (no default)")
        if t["patience"] is None:
            t["patience"] = min(200, t["max_epochs"])
        return TrainConfig(
            max_epochs=t["max_epochs"], learning_rate=t["learning_rate"], batch_size=t["batch_size"],
            patience=t["patience"], min_delta=t["min_delta"], seed=self.seed,
            modality=Modality.parse(t["modality"]), crop=t["crop"], augment=t["augment"],
            head_epochs=t["head_epochs"], weights=self.model.weights, inflation=self.model.inflation,
            freeze_policy=self.model.freeze_policy, weights_dir=self.io.cache_dir,
            cache_frozen=t["cache_frozen"],
        )

    def to_yaml(self) -> str:
        data = self.model_dump(mode="json")
        return yaml.safe_dump(data, sort_keys=True, default_flow_style=False)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path


def deep_merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """Nested override mapping from ``ELASTOFUSION_*`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        if key == WEIGHTS_ENV:
            out.setdefault("io", {})["cache_dir"] = raw
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        if not all(path):
            raise ConfigError(f"malformed environment override {key}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return out


def validate_config(data: Mapping) -> RunConfig:
    try:
        return RunConfig.model_validate(dict(data))
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from None


def load_config(
    path: str | Path | None = None,
    *,
    flags: Mapping | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Merge file < environment < flags and validate the result."""
    data: dict = {}
    if path is not None:
        data = read_config_file(path)
    data = deep_merge(data, env_overrides(environ))
    if flags:
        data = deep_merge(data, flags)
    return validate_config(data)
