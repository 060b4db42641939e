"""Experiment configuration: TOML loading, strict schema validation, and
construction of the runtime objects (train config, split spec, datasets).

Precedence is CLI flags > config file > built-in defaults. Unknown keys are
rejected before any work starts.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path
from typing import Any

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import (
    DatasetError,
    ModalityDataset,
    SplitSpec,
    SyntheticTaskSpec,
    generate_synthetic_task,
    load_dataset,
    resize_to,
)
from .engine import METHODS, TrainConfig


class ConfigError(ValueError):
    """Raised when a config file or flag set fails validation."""


_SPLIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "train_fraction": {"type": "number"},
        "val_fraction": {"type": "number"},
        "test_fraction": {"type": "number"},
        "seed": {"type": "integer"},
        "counts": {
            "type": "array", "items": {"type": "integer", "minimum": 1},
            "minItems": 3, "maxItems": 3,
        },
    },
}

_SYNTHETIC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_source": {"type": "integer", "minimum": 1},
        "n_target": {"type": "integer", "minimum": 1},
        "resolution": {
            "type": "array", "items": {"type": "integer", "minimum": 8},
            "minItems": 2, "maxItems": 2,
        },
        "label_rule": {"type": "string"},
        "modality_transform": {"type": "string"},
        "noise_std": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer"},
    },
}

_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lambda_pred": {"type": "number", "minimum": 0},
        "lambda_cyc": {"type": "number", "exclusiveMinimum": 0},
        "lr_translator": {"type": "number", "exclusiveMinimum": 0},
        "lr_predictor": {"type": "number", "exclusiveMinimum": 0},
        "decay_start_epoch": {"type": "integer", "minimum": 1},
        "total_epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "beta1_translator": {"type": "number"},
        "beta1_predictor": {"type": "number"},
        "beta2": {"type": "number"},
        "adam_eps": {"type": "number"},
        "seed": {"type": "integer"},
        "n_runs": {"type": "integer", "minimum": 1},
        "channels": {"type": "integer", "minimum": 1},
        "gen_base": {"type": "integer", "minimum": 1},
        "gen_blocks": {"type": "integer", "minimum": 0},
        "gen_stem_kernel": {"type": "integer", "minimum": 1},
        "gen_global_skip": {"type": "boolean"},
        "channels_last": {"type": "boolean"},
        "disc_base": {"type": "integer", "minimum": 1},
        "disc_layers": {"type": "integer", "minimum": 1},
        "pred_arch": {"type": "string", "enum": ["small", "resnet50"]},
        "pred_base": {"type": "integer", "minimum": 1},
        "pred_blocks": {"type": "integer", "minimum": 1},
        "buffer_capacity": {"type": "integer", "minimum": 1},
        "source_loss_weight": {"type": "number", "minimum": 0},
        "target_loss_weight": {"type": "number", "minimum": 0},
        "pred_start_epoch": {"type": "integer", "minimum": 0},
        "domain_loss_weight": {"type": "number", "minimum": 0},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "method": {"type": "string", "enum": list(METHODS)},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "root": {"type": "string"},
                "source_modality": {"type": "string"},
                "target_modality": {"type": "string"},
                "resolution": {
                    "type": "array", "items": {"type": "integer", "minimum": 8},
                    "minItems": 2, "maxItems": 2,
                },
                "synthetic": _SYNTHETIC_SCHEMA,
                "split": _SPLIT_SCHEMA,
            },
        },
        "train": _TRAIN_SCHEMA,
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "fid": {"type": "boolean"},
                "inception_score": {"type": "boolean"},
                "n_splits": {"type": "integer", "minimum": 1},
                "extractor": {"type": "string"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
            },
        },
    },
}

_DEFAULT_SPLIT = {"train_fraction": 0.8, "val_fraction": 0.1, "test_fraction": 0.1, "seed": 0}


@dataclasses.dataclass
class ExperimentConfig:
    """Validated, fully resolved experiment description."""

    method: str
    train: TrainConfig
    split: SplitSpec
    data_root: Path | None
    source_modality: str
    target_modality: str
    resolution: tuple[int, int] | None
    synthetic: SyntheticTaskSpec | None
    metrics: dict[str, Any]
    output_dir: Path
    raw: dict[str, Any]

    def load_datasets(self) -> tuple[ModalityDataset, ModalityDataset]:
        """Materialize (source, target) datasets from disk or the generator."""
        if self.synthetic is not None:
            source, target = generate_synthetic_task(self.synthetic)
        else:
            assert self.data_root is not None
            source = load_dataset(self.data_root, self.source_modality)
            target = load_dataset(self.data_root, self.target_modality)
        if self.resolution is not None:
            source = resize_to(source, self.resolution)
            target = resize_to(target, self.resolution)
        if source.resolution != target.resolution:
            raise ConfigError(
                f"source resolution {source.resolution} != target {target.resolution}; "
                "set data.resolution to resample both"
            )
        return source, target


def validate_config_dict(raw: dict[str, Any]) -> None:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {exc.message}") from None


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config_file(path: Path | str) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def resolve_config(raw: dict[str, Any], overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Validate a raw config dict (plus flag overrides) and build the runtime
    objects."""
    merged = _merge(raw, overrides or {})
    validate_config_dict(merged)

    data_sec = merged.get("data", {})
    has_root = "root" in data_sec
    has_synth = "synthetic" in data_sec
    if has_root == has_synth:
        raise ConfigError("config needs exactly one of data.root or data.synthetic")

    try:
        train = TrainConfig(**merged.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train section: {exc}") from None

    split_raw = dict(_DEFAULT_SPLIT, **data_sec.get("split", {}))
    counts = split_raw.pop("counts", None)
    try:
        split = SplitSpec(**split_raw, counts=tuple(counts) if counts else None)
    except (TypeError, DatasetError) as exc:
        raise ConfigError(f"bad split section: {exc}") from None

    synthetic = None
    if has_synth:
        synth_raw = dict(data_sec["synthetic"])
        if "resolution" in synth_raw:
            synth_raw["resolution"] = tuple(synth_raw["resolution"])
        try:
            synthetic = SyntheticTaskSpec(**synth_raw)
        except (TypeError, DatasetError) as exc:
            raise ConfigError(f"bad synthetic section: {exc}") from None

    resolution = tuple(data_sec["resolution"]) if "resolution" in data_sec else None
    metrics = dict(
        {"fid": False, "inception_score": False, "n_splits": 10, "extractor": "tiny"},
        **merged.get("metrics", {}),
    )
    return ExperimentConfig(
        method=merged.get("method", "ours"),
        train=train,
        split=split,
        data_root=Path(data_sec["root"]) if has_root else None,
        source_modality=data_sec.get("source_modality", "source"),
        target_modality=data_sec.get("target_modality", "target"),
        resolution=resolution,
        synthetic=synthetic,
        metrics=metrics,
        output_dir=Path(merged.get("output", {}).get("dir", "runs")),
        raw=merged,
    )
