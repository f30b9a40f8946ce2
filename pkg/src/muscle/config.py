"""Flat key = value configuration files.

Keys are ``TrainConfig`` field names; BEACON settings use a ``beacon_``
prefix (``beacon_lam``, ``beacon_steps``, ``beacon_k``, ``beacon_tau``,
``beacon_enabled``). The ``MUSCLE_SEED`` environment variable overrides the
file's seed.
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .beacon import BeaconConfig
from .pipeline import TrainConfig

SEED_ENV = "MUSCLE_SEED"
BEACON_PREFIX = "beacon_"


class ConfigError(ValueError):
    pass


def parse_tau(text) -> Any:
    """``mean`` or ``fixed:<v>`` (a bare number is accepted too)."""
    if isinstance(text, (int, float)):
        return float(text)
    text = str(text).strip()
    if text == "mean":
        return "mean"
    value = text[len("fixed:"):] if text.startswith("fixed:") else text
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"tau must be 'mean' or 'fixed:<number>', got {text!r}") from None


def read_config_file(path) -> Dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        doc = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{p}: tables are not supported, found {nested}")
    return doc


def build_configs(values: Mapping[str, Any] = None, env: Mapping[str, str] = None) -> Tuple[TrainConfig, BeaconConfig]:
    values = dict(values or {})
    env = os.environ if env is None else env
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    beacon_fields = {f.name for f in dataclasses.fields(BeaconConfig)}
    train_kw, beacon_kw = {}, {}
    for key, value in values.items():
        if key.startswith(BEACON_PREFIX) and key[len(BEACON_PREFIX):] in beacon_fields:
            name = key[len(BEACON_PREFIX):]
            beacon_kw[name] = parse_tau(value) if name == "tau" else value
        elif key in train_fields:
            train_kw[key] = tuple(value) if isinstance(value, list) else value
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    if env.get(SEED_ENV):
        try:
            train_kw["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    try:
        return TrainConfig(**train_kw), BeaconConfig(**beacon_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_configs(path=None, overrides: Mapping[str, Any] = None,
                 env: Mapping[str, str] = None) -> Tuple[TrainConfig, BeaconConfig]:
    values = read_config_file(path) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_configs(values, env)


def snapshot(train: TrainConfig, beacon: BeaconConfig) -> Dict[str, Any]:
    """Effective configuration as one flat JSON-ready mapping."""
    out = train.to_dict()
    for k, v in dataclasses.asdict(beacon).items():
        out[BEACON_PREFIX + k] = v
    return out
