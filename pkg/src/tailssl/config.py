"""Run and sweep configuration: JSON files validated against a published schema.

A run config bundles the dataset spec, augmentation strengths, training
hyperparameters, a name, and a seed list. Any field can be overridden from the
environment with the prefix TAILSSL_ and double-underscore path separators,
e.g. TAILSSL_TRAIN__BETA=0.5; values are parsed as JSON with a plain-string
fallback. The resolved config (defaults applied) is what gets hashed and
stored next to run outputs.
"""

import copy
import json
import os

import jsonschema

from .data import AugmentConfig, DatasetSpec
from .errors import ConfigError
from .trainer import MEMORY_CONTENTS, MODES, TrainConfig
from .util import canonical_json, sha256_text

ENV_PREFIX = "TAILSSL_"

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}

RUN_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "dataset"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "seeds": {"type": "array", "items": _INT, "minItems": 1},
        "data_dir": {"type": "string"},
        "dataset": {
            "type": "object",
            "required": ["num_classes", "feature_dim", "n1", "m1"],
            "additionalProperties": False,
            "properties": {
                "num_classes": {"type": "integer", "minimum": 2},
                "feature_dim": _POS_INT,
                "n1": _POS_INT,
                "m1": {"type": "integer", "minimum": 0},
                "gamma_l": {"type": "number", "minimum": 1},
                "gamma_u": {"type": "number", "minimum": 1},
                "test_per_class": {"type": "integer", "minimum": 0},
                "geometry_seed": _INT,
                "sample_seed": _INT,
                "separation": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "augment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "weak_noise_sigma": {"type": "number", "minimum": 0},
                "strong_noise_sigma": {"type": "number", "minimum": 0},
                "strong_dropout_prob": {"type": "number", "minimum": 0, "maximum": 1},
                "strong_scale_jitter": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": list(MODES)},
                "tau": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "alpha": {"type": "number", "minimum": 0},
                "beta": {"type": "number", "minimum": 0},
                "lambda_sampling": {"type": "number", "minimum": 0},
                "lambda_u": {"type": "number", "minimum": 0},
                "lambda_m": {"type": "number", "minimum": 0},
                "batch_size": _POS_INT,
                "memory_capacity": _POS_INT,
                "get_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "memory_content": {"enum": list(MEMORY_CONTENTS)},
                "warmup_epochs": {"type": "integer", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "iters_per_epoch": _POS_INT,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "ema_decay": {"type": "number", "minimum": 0, "maximum": 1},
                "adam_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "adam_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "adam_eps": {"type": "number", "exclusiveMinimum": 0},
                "hidden_sizes": {"type": "array", "items": _POS_INT, "minItems": 1},
                "aux_stopgrad": {"type": "boolean"},
                "shot_many_min": {"type": ["integer", "null"]},
                "shot_few_max": {"type": ["integer", "null"]},
            },
        },
    },
}

SWEEP_PARAMETERS = ("beta", "lambda_sampling", "alpha", "memory_content", "mode")

SWEEP_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["parameter", "values", "base"],
    "additionalProperties": False,
    "properties": {
        "parameter": {"enum": list(SWEEP_PARAMETERS)},
        "values": {"type": "array", "minItems": 1},
        "base": {"type": ["object", "string"]},  # inline run config or a path to one
    },
}

_DEFAULTS = {
    "seeds": [0],
    "data_dir": "data",
    "dataset": {
        "gamma_l": 1.0,
        "gamma_u": 1.0,
        "test_per_class": 100,
        "geometry_seed": 0,
        "sample_seed": 1,
        "separation": 3.0,
    },
    "augment": {
        "weak_noise_sigma": 0.1,
        "strong_noise_sigma": 0.4,
        "strong_dropout_prob": 0.3,
        "strong_scale_jitter": 0.1,
    },
    "train": {
        "mode": "bmb",
        "tau": 0.95,
        "alpha": 0.75,
        "beta": 1.0,
        "lambda_sampling": 0.75,
        "lambda_u": 1.0,
        "lambda_m": 0.25,
        "batch_size": 64,
        "memory_capacity": 128,
        "get_fraction": 0.5,
        "memory_content": "strong",
        "warmup_epochs": 5,
        "epochs": 60,
        "iters_per_epoch": 100,
        "lr": 0.002,
        "ema_decay": 0.999,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "hidden_sizes": [16, 8],
        "aux_stopgrad": False,
        "shot_many_min": None,
        "shot_few_max": None,
    },
}


def _merge_defaults(user: dict) -> dict:
    merged = copy.deepcopy(user)
    for key, value in _DEFAULTS.items():
        if isinstance(value, dict):
            section = dict(value)
            section.update(merged.get(key) or {})
            merged[key] = section
        else:
            merged.setdefault(key, copy.deepcopy(value))
    return merged


def apply_env_overrides(cfg: dict, env=None) -> dict:
    """Override config fields from TAILSSL_* variables (SECTION__FIELD paths)."""
    env = os.environ if env is None else env
    out = copy.deepcopy(cfg)
    for key in sorted(env):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        raw = env[key]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {part} is not a config section")
        node[path[-1]] = value
    return out


def validate_run_config(cfg: dict) -> dict:
    """Apply defaults and schema-validate; returns the resolved config dict."""
    resolved = _merge_defaults(cfg)
    try:
        jsonschema.validate(resolved, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {path}: {exc.message}") from None
    return resolved


def load_run_config(path, env=None, use_env: bool = True) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top-level config must be an object")
    if use_env:
        raw = apply_env_overrides(raw, env)
    return validate_run_config(raw)


def load_sweep_config(path, env=None, use_env: bool = True) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read sweep config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(raw, SWEEP_SCHEMA)
    except jsonschema.ValidationError as exc:
        path_str = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"sweep field {path_str}: {exc.message}") from None
    base = raw["base"]
    if isinstance(base, str):
        base_path = os.path.join(os.path.dirname(os.fspath(path)), base)
        base = load_run_config(base_path, env=env, use_env=use_env)
    else:
        if use_env:
            base = apply_env_overrides(base, env)
        base = validate_run_config(base)
    # Type-check each sweep value by materializing the config it produces.
    for value in raw["values"]:
        trial = copy.deepcopy(base)
        trial["train"][raw["parameter"]] = value
        validate_run_config(trial)
    return {"parameter": raw["parameter"], "values": raw["values"], "base": base}


def build_dataset_spec(cfg: dict) -> DatasetSpec:
    return DatasetSpec(**cfg["dataset"])


def build_augment_config(cfg: dict) -> AugmentConfig:
    try:
        return AugmentConfig(**cfg["augment"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_train_config(cfg: dict, seed: int) -> TrainConfig:
    train = dict(cfg["train"])
    train["hidden_sizes"] = tuple(train["hidden_sizes"])
    try:
        return TrainConfig(
            num_classes=cfg["dataset"]["num_classes"],
            input_dim=cfg["dataset"]["feature_dim"],
            seed=seed,
            augment=build_augment_config(cfg),
            **train,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_hash(resolved_cfg: dict) -> str:
    return sha256_text(canonical_json(resolved_cfg))
