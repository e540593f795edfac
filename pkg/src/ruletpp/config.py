"""Config file loading (JSON or TOML) for the CLI pipeline.

Training configs mirror TrainConfig field names, plus a ``catalog``
entry pointing at the catalog JSON (resolved relative to the config
file).  Generator configs embed the full ground truth plus a ``count``
and optional ``seed``.  Schemas live in the repository's ``schemas/``
directory.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError, ValidationError
from .simulate import GroundTruth, ground_truth_from_dict
from .trainer import TrainConfig

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _read_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix.lower() == ".toml":
        try:
            return tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    try:
        return json.loads(raw.decode())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def load_train_config(path):
    """Parse a training config; returns (TrainConfig, catalog_path, extras)."""
    obj = _read_config_file(path)
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a table/object at top level")
    extras = {}
    kwargs = {}
    catalog_path = None
    for key, value in obj.items():
        if key == "catalog":
            catalog_path = (Path(path).parent / value).resolve()
        elif key in _TRAIN_FIELDS:
            kwargs[key] = value
        elif key in ("strict",):
            extras[key] = value
        else:
            raise ConfigError(f"{path}: unknown field {key!r}")
    for required in ("num_rules", "max_rule_length"):
        if required not in kwargs:
            raise ConfigError(f"{path}: missing required field {required!r}")
    try:
        cfg = TrainConfig(**kwargs)
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg, catalog_path, extras


def load_generator_config(path):
    """Parse a ground-truth config; returns (GroundTruth, count, seed)."""
    obj = _read_config_file(path)
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object at top level")
    count = obj.pop("count", None)
    seed = obj.pop("seed", 0)
    try:
        gt = ground_truth_from_dict(obj)
    except (ValidationError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: field {exc}" if isinstance(exc, KeyError) else f"{path}: {exc}") from exc
    if count is not None and (not isinstance(count, int) or count < 1):
        raise ConfigError(f"{path}: field 'count' must be a positive integer")
    return gt, count, seed


def load_truth_config(path) -> GroundTruth:
    gt, _count, _seed = load_generator_config(path)
    return gt
