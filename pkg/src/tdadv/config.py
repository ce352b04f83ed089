"""Run configuration: one JSON document, schema-validated before any work.

Defaults follow the evaluated protocol wherever it fixes one: step size
5e-4, 500 iterations, epsilon 8/255, neighborhood radius 0.1 (1 for JPEG
quality), grid step 0.1 (1 for JPEG).  Flags may override individual keys;
the effective config lands in the run manifest.
"""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

RUN_CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["synthetic", "ppm_dir"]},
                "samples_per_class": {"type": "integer", "minimum": 1},
                "image_size": {"type": "integer", "minimum": 16},
                "seed": {"type": "integer", "minimum": 0},
                "directory": {"type": "string"},
                "labels_file": {"type": "string"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "num_classes": {"type": "integer", "minimum": 2},
                "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "augment_flip": {"type": "boolean"},
                "augment_scale_jitter": {"type": "boolean"},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["scale", "blur", "gamma", "jpeg", "flip", "perspective"]},
                "mode": {"enum": ["targeted", "untargeted"]},
                "epsilon": {"type": "number", "minimum": 0, "maximum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "iterations": {"type": "integer", "minimum": 1},
                "eot_samples_per_pair": {"type": "integer", "minimum": 1},
                "optimizer": {"enum": ["fgsm", "pgd", "mim", "cw"]},
                "mim_mu": {"type": "number", "minimum": 0},
                "cw_kappa": {"type": "number", "minimum": 0},
                "target_strategy": {"enum": ["random", "least_likely"]},
                "stealth_center": {"type": ["number", "string", "null"]},
                "num_images": {"type": "integer", "minimum": 1},
                "centers": {"type": "array", "items": {"type": ["number", "string"]}, "minItems": 1},
                "radius": {"type": "number", "minimum": 0},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid_step": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "landscape": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "theta_lo": {"type": "number"},
                "theta_hi": {"type": "number"},
                "step": {"type": "number", "exclusiveMinimum": 0},
                "per_image": {"type": "boolean"},
            },
        },
        "defense": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["jpeg", "randomized_smoothing"]},
                "jpeg_quality": {"type": "integer", "minimum": 1, "maximum": 100},
                "num_samples": {"type": "integer", "minimum": 1},
                "noise_sigma": {"type": "number", "minimum": 0},
            },
        },
        "transfer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "blackbox_model_path": {"type": "string"},
            },
        },
        "capacity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_n": {"type": "integer", "minimum": 1, "maximum": 25},
                "num_images": {"type": "integer", "minimum": 1},
            },
        },
    },
}

DEFAULTS: dict = {
    "seed": 0,
    "workers": 1,
    "dataset": {"kind": "synthetic", "samples_per_class": 500, "image_size": 32, "seed": 7},
    "model": {"path": "model.tdaw", "num_classes": 10, "widths": [16, 32, 64], "seed": 0},
    "train": {
        "epochs": 16,
        "batch_size": 32,
        "learning_rate": 0.1,
        "momentum": 0.9,
        "seed": 0,
        "augment_flip": True,
        "augment_scale_jitter": True,
    },
    "attack": {
        "kind": "scale",
        "mode": "targeted",
        "epsilon": 8.0 / 255.0,
        "alpha": 5e-4,
        "iterations": 500,
        "eot_samples_per_pair": 1,
        "optimizer": "pgd",
        "mim_mu": 1.0,
        "cw_kappa": 0.0,
        "target_strategy": "random",
        "stealth_center": None,
        "num_images": 50,
        "radius": None,  # kind-dependent: 1 for jpeg, 0.1 otherwise
    },
    "eval": {"grid_step": None},  # kind-dependent: 1 for jpeg, 0.1 otherwise
    "landscape": {"theta_lo": 0.3, "theta_hi": 1.7, "step": 0.05, "per_image": False},
    "defense": {"kind": "jpeg", "jpeg_quality": 75, "num_samples": 25, "noise_sigma": 0.12},
    "transfer": {"blackbox_model_path": "blackbox.tdaw"},
    "capacity": {"max_n": 8, "num_images": 30},
}


class ConfigError(Exception):
    pass


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    doc: dict = field(default_factory=dict)

    @staticmethod
    def load(path: str | Path | None, overrides: list[str] = ()) -> "RunConfig":
        """Merge defaults <- config file <- --set dotted.key=json overrides."""
        doc = {}
        if path is not None:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        merged = _deep_merge(DEFAULTS, doc)
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"override {ov!r} is not dotted.key=value")
            key, _, raw = ov.partition("=")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = merged
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        # the kind-dependent placeholders are not part of the public schema
        cleaned = json.loads(json.dumps(merged))
        for section, key in (("attack", "radius"), ("eval", "grid_step")):
            if cleaned.get(section, {}).get(key) is None:
                cleaned[section].pop(key, None)
        try:
            jsonschema.validate(cleaned, RUN_CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"config rejected by schema: {exc.message} (path: {list(exc.absolute_path)})") from exc
        return RunConfig(cleaned)

    def __getitem__(self, key: str) -> Any:
        return self.doc[key]

    def get(self, *keys, default=None):
        node: Any = self.doc
        for key in keys:
            if not isinstance(node, dict) or key not in node:
                return default
            node = node[key]
        return node

    def radius_for(self, kind: str) -> float:
        r = self.get("attack", "radius")
        if r is not None:
            return float(r)
        return 1.0 if kind == "jpeg" else 0.1

    def grid_step_for(self, kind: str) -> float:
        s = self.get("eval", "grid_step")
        if s is not None:
            return float(s)
        return 1.0 if kind == "jpeg" else 0.1

    def canonical_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, indent=2)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.doc, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def build_manifest(config: RunConfig, command: str, timestamp: str) -> dict:
    from . import __version__

    return {
        "command": command,
        "config": config.doc,
        "config_hash": config.config_hash(),
        "versions": {
            "tdadv": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "timestamp": timestamp,
    }
