"""Run configuration: JSON schema, defaults, and exhaustive validation."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

import jsonschema

from .loda import InferenceConfig
from .model import ModelConfig

SCHEMA_VERSION = 1
OUTPUT_ENV = "CONCEPTSPLIT_OUT"


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every offending field."""

    def __init__(self, errors):
        self.errors = list(errors) if not isinstance(errors, str) else [errors]
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


_num = {"type": "number"}
_int = {"type": "integer"}
_str = {"type": "string"}


def _props(dc) -> dict:
    out = {}
    for f in fields(dc):
        if f.type in ("int", int):
            out[f.name] = _int
        elif f.type in ("float", float):
            out[f.name] = _num
        elif f.type in ("bool | None",):
            out[f.name] = {"type": ["boolean", "null"]}
        elif f.type in ("bool", bool):
            out[f.name] = {"type": "boolean"}
        else:
            out[f.name] = {}
    return out


SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "mode": {"enum": ["fast", "verify"]},
        "output_dir": _str,
        "model": {"type": "object", "additionalProperties": False, "properties": _props(ModelConfig)},
        "dataset": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["synthetic", "manifest"]},
                "seed": _int,
                "count": {"type": "integer", "minimum": 1},
                "objects": {"type": "array", "items": {"enum": [1, 2, 3]}, "minItems": 1},
                "path": _str,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "seed": _int,
                "cond_drop": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "checkpoint": _str,
        "adapter_db": _str,
        "adapter": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "concept": _str,
                "name": _str,
                "word": _str,
                "variant": {"enum": ["value", "key", "key+value"]},
                "rank": {"type": "integer", "minimum": 1},
                "iters": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "images": {"type": "integer", "minimum": 3},
                "batch_size": {"type": "integer", "minimum": 1},
                "seed": _int,
            },
        },
        "inference": {"type": "object", "additionalProperties": False, "properties": _props(InferenceConfig)},
        "prompt": _str,
        "bindings": {"type": "object", "additionalProperties": _str},
        "targets": {"type": "array", "items": _str},
        "seeds": {"type": "array", "items": _int, "minItems": 1},
        "adapter_mode": {"enum": ["token-wise", "merged"]},
        "use_adapters": {"type": "boolean"},
        "dump_maps": {"type": "boolean"},
        "ablate": {
            "type": "object",
            "additionalProperties": False,
            "required": ["axis", "values"],
            "properties": {
                "axis": {"enum": ["gamma", "p", "m", "N", "variant"]},
                "values": {"type": "array", "minItems": 1},
                "modes": {"type": "array", "items": {"enum": ["baseline", "stage1", "full"]}},
            },
        },
    },
}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "mode": "fast",
    "model": asdict(ModelConfig()),
    "train": {"steps": 1500, "lr": 1e-3, "batch_size": 8, "seed": 0, "cond_drop": 0.1},
    "adapter": {"variant": "value", "rank": 8, "iters": 300, "lr": 5e-3, "images": 6,
                "batch_size": 4, "seed": 0},
    "inference": InferenceConfig().to_dict(),
    "seeds": [0],
    "adapter_mode": "token-wise",
    "use_adapters": True,
    "dump_maps": False,
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "bindings":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(err) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = [f"{_path(e)}: {e.message}" for e in sorted(validator.iter_errors(cfg), key=str)]
    if not errors:
        try:
            ModelConfig(**cfg["model"])
        except Exception as exc:  # noqa: BLE001 - reported as config error
            errors.append(f"model: {exc}")
        errors += [f"inference.{e}" for e in InferenceConfig(**cfg["inference"]).validate()]
        ab = cfg.get("ablate")
        if ab:
            kinds = {"gamma": (int, float), "p": (int, float), "m": (int, float), "N": (int,),
                     "variant": (str,)}[ab["axis"]]
            for i, v in enumerate(ab["values"]):
                if isinstance(v, bool) or not isinstance(v, kinds):
                    errors.append(f"ablate.values.{i}: {v!r} has the wrong type for axis {ab['axis']}")
    if errors:
        raise ConfigError(errors)


def resolve(user: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the user's file, then command-line overrides; validated."""
    cfg = _merge(DEFAULTS, user or {})
    cfg = _merge(cfg, overrides or {})
    if "output_dir" not in cfg:
        cfg["output_dir"] = os.environ.get(OUTPUT_ENV, "runs")
    validate(cfg)
    return cfg


def load(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None


def inference_config(cfg: dict) -> InferenceConfig:
    return InferenceConfig(**cfg["inference"])


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])
