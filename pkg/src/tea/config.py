"""Run configuration: defaults, schema validation and resolution."""
from __future__ import annotations

import copy
import hashlib
import json

import jsonschema

from .adapt import METHODS, AdaptConfig
from .sgld import INIT_KINDS, SCALING_MODES, SgldConfig
from .shiftbench import CORRUPTIONS, SEVERITIES

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": "runs/default",
    "model": {"arch": "auto", "hidden": 32, "channels": [8, 16], "norm": "batch", "groups": 4},
    "data": {
        "kind": "glyphs",
        "n_train": 3000,
        "n_test": 1000,
        "image_size": 8,
        "num_classes": 6,
        "means": [[5.0, 4.0], [5.0, -4.0]],
        "std": 1.0,
        "n_per_class": 250,
        "shift": {"rotation_deg": 40.0, "translation": [0.0, 0.0], "scale": 1.0, "noise_std": 0.0},
        "train_images": None,
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
        "corruption": None,
    },
    "train": {"epochs": 8, "batch_size": 64, "lr": 0.005},
    "adapt": {
        "method": "TEA",
        "steps": 1,
        "rate": 0.001,
        "optimizer": "adam",
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "mode": "continual",
        "batch_size": 200,
        "pl_threshold": 0.9,
        "sgld": {"steps": 20, "step_size": 0.1, "noise_std": 0.01, "init": "uniform",
                 "clamp_to_range": False, "scaling_mode": "decoupled"},
    },
    "eval": {"corruptions": list(CORRUPTIONS), "severities": list(SEVERITIES), "batch_size": 200},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_path = {"type": ["string", "null"]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 63},
    "output_dir": {"type": "string"},
    "model": _obj({
        "arch": {"enum": ["auto", "mlp2d", "cnn"]},
        "hidden": _posint,
        "channels": {"type": "array", "items": _posint, "minItems": 2, "maxItems": 2},
        "norm": {"enum": ["batch", "group"]},
        "groups": _posint,
    }),
    "data": _obj({
        "kind": {"enum": ["mixture2d", "glyphs", "idx"]},
        "n_train": _posint,
        "n_test": _posint,
        "image_size": {"type": "integer", "minimum": 4, "multipleOf": 2},
        "num_classes": {"type": "integer", "minimum": 2},
        "means": {"type": "array", "minItems": 2,
                  "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
        "std": _pos,
        "n_per_class": _posint,
        "shift": _obj({
            "rotation_deg": _num,
            "translation": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            "scale": _pos,
            "noise_std": {"type": "number", "minimum": 0},
        }),
        "train_images": _path,
        "train_labels": _path,
        "test_images": _path,
        "test_labels": _path,
        "corruption": {"oneOf": [
            {"type": "null"},
            _obj({"kind": {"enum": list(CORRUPTIONS)},
                  "severity": {"type": "integer", "minimum": 1, "maximum": 5}},
                 required=("kind", "severity")),
        ]},
    }),
    "train": _obj({"epochs": _posint, "batch_size": _posint, "lr": _pos}),
    "adapt": _obj({
        "method": {"enum": list(METHODS)},
        "steps": _posint,
        "rate": _pos,
        "optimizer": {"enum": ["adam", "sgd"]},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps": _pos,
        "mode": {"enum": ["continual", "episodic"]},
        "batch_size": {"oneOf": [_posint, {"type": "null"}]},
        "pl_threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "sgld": _obj({
            "steps": _posint,
            "step_size": _pos,
            "noise_std": {"type": "number", "minimum": 0},
            "init": {"enum": list(INIT_KINDS)},
            "clamp_to_range": {"type": "boolean"},
            "scaling_mode": {"enum": list(SCALING_MODES)},
        }),
    }),
    "eval": _obj({
        "corruptions": {"type": "array", "items": {"enum": list(CORRUPTIONS)}, "minItems": 1,
                        "uniqueItems": True},
        "severities": {"type": "array", "items": {"enum": list(SEVERITIES)}, "minItems": 1,
                       "uniqueItems": True},
        "batch_size": _posint,
    }),
})


def _merge(defaults, user):
    out = copy.deepcopy(defaults)
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(user: dict, seed: int | None = None):
    """Validate a user config and expand every default."""
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    try:
        jsonschema.validate(user, SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {err.message}") from None
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if cfg["model"]["arch"] == "auto":
        cfg["model"]["arch"] = "mlp2d" if cfg["data"]["kind"] == "mixture2d" else "cnn"
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"resolved config invalid: {err.message}") from None
    arch, kind = cfg["model"]["arch"], cfg["data"]["kind"]
    if (arch == "mlp2d") != (kind == "mixture2d"):
        raise ConfigError(f"model arch {arch!r} does not fit data kind {kind!r}")
    return cfg


def load(path, seed=None):
    try:
        with open(path) as f:
            user = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    return resolve(user, seed)


def adapt_config(cfg) -> AdaptConfig:
    a = dict(cfg["adapt"])
    sgld = SgldConfig(**a.pop("sgld"))
    a.pop("batch_size")
    return AdaptConfig(sgld=sgld, **a)


def config_hash(cfg):
    """SHA-256 of the canonical config, ignoring where outputs go."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()
