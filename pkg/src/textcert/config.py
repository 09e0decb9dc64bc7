"""Experiment configuration (JSON, validated against a schema)."""

from __future__ import annotations

import copy
import json

import jsonschema

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "regime": {"enum": ["normal", "augmentation", "adversarial", "verifiable"]},
        "architecture": {"type": "string"},
        "arch_sizes": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 1}},
        "level": {"enum": ["word", "char"]},
        "class_count": {"type": "integer", "minimum": 2},
        "train": {"type": "string"},
        "validation": {"type": "string"},
        "test": {"type": "string"},
        "embeddings": {"type": "string"},
        "table": {"type": "string"},
        "checkpoint": {"type": "string"},
        "delta": {"type": "integer", "minimum": 0},
        "deltas": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "seed": {"type": "integer"},
        "kappa": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "start": {"type": "number", "minimum": 0, "maximum": 1},
                "end": {"type": "number", "minimum": 0, "maximum": 1},
                "warmup_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "mix": {"type": "number", "minimum": 0, "maximum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "max_epochs": {"type": "integer", "minimum": 1},
        "patience": {"type": "integer", "minimum": 1},
        "oracle_budget": {"type": "integer", "minimum": 1},
        "oracle_max_delta": {"type": "integer", "minimum": 0},
        "char_limit": {"type": "integer", "minimum": 1},
        "attack": {"type": "boolean"},
    },
}

DEFAULTS = {
    "regime": "normal",
    "architecture": "sst-char",
    "arch_sizes": {},
    "level": "char",
    "class_count": 2,
    "delta": 3,
    "deltas": [1, 2, 3],
    "seed": 0,
    "kappa": {"start": 1.0, "end": 0.25, "warmup_fraction": 0.5},
    "mix": 0.5,
    "lr": 1e-3,
    "batch_size": 32,
    "max_epochs": 20,
    "patience": 5,
    "oracle_budget": 2_000_000,
    "oracle_max_delta": 3,
    "char_limit": 300,
    "attack": True,
}


def resolve(user: dict | None = None, **overrides) -> dict:
    """Defaults, then ``user``, then non-``None`` ``overrides``; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    for src in (user or {}), {k: v for k, v in overrides.items() if v is not None}:
        for k, v in src.items():
            if k == "kappa":
                cfg["kappa"] = {**cfg["kappa"], **v}
            else:
                cfg[k] = v
    jsonschema.validate(cfg, SCHEMA)
    return cfg


def load(path, **overrides) -> dict:
    with open(path, encoding="utf-8") as f:
        return resolve(json.load(f), **overrides)
