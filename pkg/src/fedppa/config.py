"""TOML run configuration.

A config file has up to six sections; every key is optional and missing keys
take the defaults below (8 clients, 51 rounds, 10 local epochs, SGD with
lr 0.01, momentum 0.9, weight decay 5e-4)::

    [run]        strategies, rounds, local_epochs, batch_size, seed, workers,
                 record_seconds, eq7_literal, checkpoint
    [partition]  alpha, num_clients, seed, train_fraction, min_samples, max_attempts
    [optimizer]  learning_rate, momentum, weight_decay
    [alignment]  steps_per_layer, align_lr, sample_cap, max_halvings, line_search
    [models]     scale, assignment
    [data]       source, train_images, train_labels, test_images, test_labels,
                 subset, num_classes, synth_per_class, synth_test_per_class,
                 synth_image_size, synth_seed

Unknown sections or keys are rejected. Overrides are ``key=value`` strings
applied after the file; ``key`` is ``section.name`` or a bare name (resolved
against ``run`` first, then the other sections in the order above), and
``value`` is parsed as a TOML value, falling back to a plain string.
"""
from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .alignment import AlignmentConfig
from .data import PartitionConfig
from .errors import ConfigError
from .nn import SgdConfig
from .orchestrator import STRATEGIES, DataConfig, RunConfig
from .zoo import FAMILY_NAMES


def _int(lo=None):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(key, f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(key, f"must be >= {lo}, got {v}")
        return v

    return check


def _float(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(key, f"expected a number, got {v!r}")
        v = float(v)
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ConfigError(key, f"must be {'>' if lo_open else '>='} {lo}, got {v!r}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ConfigError(key, f"must be {'<' if hi_open else '<='} {hi}, got {v!r}")
        return v

    return check


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(key, f"expected true/false, got {v!r}")
    return v


def _str(key, v):
    if not isinstance(v, str):
        raise ConfigError(key, f"expected a string, got {v!r}")
    return v


def _choice(*options):
    def check(key, v):
        if v not in options:
            raise ConfigError(key, f"must be one of {', '.join(options)}, got {v!r}")
        return v

    return check


def _str_list(options):
    def check(key, v):
        if isinstance(v, str):
            v = [x.strip() for x in v.split(",") if x.strip()]
        if not isinstance(v, list) or not v:
            raise ConfigError(key, f"expected a nonempty list, got {v!r}")
        for x in v:
            if x not in options:
                raise ConfigError(key, f"{x!r} is not one of {', '.join(options)}")
        return tuple(v)

    return check


SCHEMA = {
    "run": {
        "strategies": _str_list(STRATEGIES),
        "rounds": _int(1),
        "local_epochs": _int(0),
        "batch_size": _int(1),
        "seed": _int(0),
        "workers": _int(1),
        "record_seconds": _bool,
        "eq7_literal": _bool,
        "checkpoint": _bool,
    },
    "partition": {
        "alpha": _float(0.0, lo_open=True),
        "num_clients": _int(1),
        "seed": _int(0),
        "train_fraction": _float(0.0, 1.0, lo_open=True, hi_open=True),
        "min_samples": _int(2),
        "max_attempts": _int(1),
    },
    "optimizer": {
        "learning_rate": _float(0.0, lo_open=True),
        "momentum": _float(0.0, 1.0, hi_open=True),
        "weight_decay": _float(0.0),
    },
    "alignment": {
        "steps_per_layer": _int(0),
        "align_lr": _float(0.0, lo_open=True),
        "sample_cap": _int(1),
        "max_halvings": _int(0),
        "line_search": _choice("backtracking", "exact"),
    },
    "models": {
        "scale": _choice("tiny", "small"),
        "assignment": _str_list(FAMILY_NAMES),
    },
    "data": {
        "source": _choice("mnist5k", "idx", "synth"),
        "train_images": _str,
        "train_labels": _str,
        "test_images": _str,
        "test_labels": _str,
        "subset": _int(0),
        "num_classes": _int(2),
        "synth_per_class": _int(1),
        "synth_test_per_class": _int(1),
        "synth_image_size": _int(2),
        "synth_seed": _int(0),
    },
}


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _resolve(key: str) -> tuple:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(key, f"unknown section {section!r}")
        if name not in SCHEMA[section]:
            raise ConfigError(key, "unknown key")
        return section, name
    for section, keys in SCHEMA.items():
        if key in keys:
            return section, key
    raise ConfigError(key, "unknown key")


def load_raw(path=None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML ({exc})") from None
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(section, "expected a [section] table")
        for name in body:
            if name not in SCHEMA[section]:
                raise ConfigError(f"{section}.{name}", "unknown key")
    return raw


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read, override and validate a run configuration."""
    raw = {section: dict(body) for section, body in load_raw(path).items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, text = item.split("=", 1)
        section, name = _resolve(key.strip())
        raw.setdefault(section, {})[name] = _parse_value(text.strip())

    values = {}
    for section, body in raw.items():
        for name, v in body.items():
            values[(section, name)] = SCHEMA[section][name](f"{section}.{name}", v)

    def pick(section):
        return {name: v for (s, name), v in values.items() if s == section}

    run = pick("run")
    part = pick("partition")
    part.setdefault("seed", run.get("seed", 0))
    models = pick("models")
    num_clients = part.get("num_clients", 8)
    if "assignment" in models and len(models["assignment"]) != num_clients:
        raise ConfigError(
            "models.assignment", f"{len(models['assignment'])} names for {num_clients} clients"
        )
    data = pick("data")
    if data.get("source") == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            if not data.get(name):
                raise ConfigError(f"data.{name}", "required when data.source = 'idx'")
    if path is not None:
        base = Path(path).resolve().parent
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            if data.get(name):
                data[name] = str((base / data[name]) if not Path(data[name]).is_absolute() else Path(data[name]))

    return RunConfig(
        strategies=run.get("strategies", STRATEGIES),
        rounds=run.get("rounds", 51),
        local_epochs=run.get("local_epochs", 10),
        batch_size=run.get("batch_size", 32),
        seed=run.get("seed", 0),
        workers=run.get("workers", 1),
        record_seconds=run.get("record_seconds", True),
        eq7_literal=run.get("eq7_literal", False),
        checkpoint=run.get("checkpoint", False),
        sgd=SgdConfig(**pick("optimizer")),
        partition=PartitionConfig(**part),
        alignment=AlignmentConfig(**pick("alignment")),
        scale=models.get("scale", "tiny"),
        assignment=models.get("assignment", ()),
        data=DataConfig(**data),
    )
