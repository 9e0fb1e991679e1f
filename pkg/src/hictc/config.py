"""Run configuration: one JSON document covering every module's knobs.

Validation is strict: unknown keys are rejected with their dotted field
path, and every value must match the type of its default. Command-line
flags override config keys, which override the defaults below.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

from .encoder import EncoderConfig
from .multitask import MultitaskSpec
from .train import AdamConfig, ScheduleConfig


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending field path."""


DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "run",
    "data": {
        "train_features": None,
        "train_transcripts": None,
        "dev_features": None,
        "dev_transcripts": None,
        "cap": 300,
        "fraction": 1.0,
        "batch_sizes": [128, 104, 80, 56, 32],
    },
    "vocab_path": None,
    "lexicon_path": None,
    "encoder": {
        "input_dim": 8,
        "num_layers": 5,
        "hidden_per_direction": 320,
        "dropout_rate": 0.1,
    },
    "multitask": {"regime": "multitask", "lambda": 0.5, "aux_layer": 3},
    "adam": {
        "lr": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "warm_updates": 25000,
    },
    "schedule": {
        "checkpoint_interval": 500,
        "patience": 10,
        "window": 3,
        "max_checkpoints": None,
    },
}

# expected element type for keys whose default is None (nullable)
_NULLABLE: dict[str, type] = {
    "data.train_features": str,
    "data.train_transcripts": str,
    "data.dev_features": str,
    "data.dev_transcripts": str,
    "vocab_path": str,
    "lexicon_path": str,
    "schedule.max_checkpoints": int,
}


def _check_leaf(path: str, value, default):
    if default is None:
        if value is None:
            return None
        want = _NULLABLE[path]
        if isinstance(value, bool) or not isinstance(value, want):
            raise ConfigError(f"{path}: expected {want.__name__} or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        if len(value) != len(default):
            raise ConfigError(f"{path}: expected {len(default)} entries")
        return [
            _check_leaf(f"{path}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default))
        ]
    raise ConfigError(f"{path}: unsupported value type")


def _merge(defaults: dict, user: dict, prefix: str = "") -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'document'}: expected an object")
    for key in user:
        if key not in defaults:
            raise ConfigError(f"{prefix}{key}: unknown key")
    out = {}
    for key, dval in defaults.items():
        if key not in user:
            out[key] = copy.deepcopy(dval)
        elif isinstance(dval, dict):
            out[key] = _merge(dval, user[key], f"{prefix}{key}.")
        else:
            out[key] = _check_leaf(f"{prefix}{key}", user[key], dval)
    return out


def validate_config(document: dict) -> dict:
    """Merged document: defaults overlaid by the user's keys, all checked."""
    return _merge(DEFAULTS, document)


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            document = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"document: invalid JSON ({err})") from None
    return validate_config(document)


@dataclass
class RunPlan:
    """Typed view of a validated config document."""

    seed: int
    out_dir: str
    data: dict
    vocab_path: str | None
    lexicon_path: str | None
    encoder: EncoderConfig
    spec: MultitaskSpec
    adam: AdamConfig
    schedule: ScheduleConfig


def build_plan(doc: dict) -> RunPlan:
    """Construct the typed configs, mapping range errors to field paths."""

    def section(name, ctor, kwargs):
        try:
            return ctor(**kwargs)
        except ValueError as err:
            raise ConfigError(f"{name}: {err}") from None

    enc = section("encoder", EncoderConfig, doc["encoder"])
    m = doc["multitask"]
    spec = section(
        "multitask",
        MultitaskSpec,
        {"regime": m["regime"], "lam": m["lambda"], "aux_layer": m["aux_layer"]},
    )
    if spec.aux_layer > enc.num_layers:
        raise ConfigError(
            f"multitask.aux_layer: {spec.aux_layer} outside 1..{enc.num_layers}"
        )
    adam = section("adam", AdamConfig, doc["adam"])
    sched = section("schedule", ScheduleConfig, doc["schedule"])
    frac = doc["data"]["fraction"]
    if not 0.0 < frac <= 1.0:
        raise ConfigError(f"data.fraction: must lie in (0, 1], got {frac}")
    return RunPlan(
        seed=doc["seed"],
        out_dir=doc["out_dir"],
        data=doc["data"],
        vocab_path=doc["vocab_path"],
        lexicon_path=doc["lexicon_path"],
        encoder=enc,
        spec=spec,
        adam=adam,
        schedule=sched,
    )
