"""Experiment configuration: nested YAML sections checked against typed defaults."""
from __future__ import annotations

import copy
import logging
from pathlib import Path

import yaml

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Unknown key, wrong type or out-of-range value in an experiment config."""


MATRIX = "matrix"  # number or nested list; null means zero

_LQG_MODEL = {
    "A": 1.0, "B": 1.0, "sigma": 1.0, "H": 1.0, "gamma": 1.0, "kappa": 1.0,
    "Q": 1.0, "R": 1.0, "M": 1.0, "P": 0.0, "T": 10.0,
    "x_mean0": 0.0, "x_var0": 1.0, "z_mean0": 0.0, "z_var0": 1.0,
}

DEFAULTS = {
    "lqg-memlim": {
        "model": dict(_LQG_MODEL),
        "solver": {"dt": 1e-3, "tol": 1e-10, "max_iter": 500, "damping": 1.0},
        "sim": {"n_paths": 100, "dt": 1e-3, "seed": 0, "record_every": 10},
    },
    "nonlqg-obstacle": {
        "model": {
            "t_start": 0.3, "t_end": 0.6, "band_lo": 0.1, "band_hi": 2.0, "weight": 1000.0,
            "terminal_weight": 10.0, "T": 1.0, "var0": 0.01,
        },
        "grid": {"lo": -5.0, "hi": 5.0, "n": 81, "control_bound": 60.0, "scheme": "fitted"},
        "sweep": {
            "max_iter": 50, "tol": 1e-4, "damping": 1.0, "mass_floor": 1e-6,
            "boundary": "reflect", "update": "backward", "control": "exact",
        },
        "full_state": {"n_x": 401, "n_z": 9},
        "baseline": {"dt": 1e-3},
        "sim": {"n_paths": 100, "dt": 1e-3, "seed": 0, "record_every": 1},
        "export": {"policy_every": 10},
    },
    "lqg-kalman-repro": {
        "model": {
            "A": 1.0, "B": 1.0, "sigma": 1.0, "H": 1.0, "gamma": 1.0,
            "Q": 1.0, "R": 1.0, "P": 0.0, "T": 10.0, "var0": 1.0,
        },
        "solver": {"dt": 1e-3},
    },
}

EXPERIMENTS = tuple(DEFAULTS)

_MATRIX_KEYS = {"A", "B", "sigma", "H", "gamma", "kappa", "Q", "R", "M", "P"}

_CHOICES = {
    ("grid", "scheme"): ("fitted", "upwind"),
    ("sweep", "boundary"): ("reflect", "extrapolate"),
    ("sweep", "update"): ("backward", "frozen"),
    ("sweep", "control"): ("exact", "centred"),
}

_POSITIVE = {"dt", "T", "tol", "damping", "n_paths", "max_iter", "record_every", "policy_every",
             "weight", "control_bound", "var0"}


def _check_type(path, default, value, key):
    if key in _MATRIX_KEYS:
        if value is None:
            return 0.0
        if isinstance(value, bool) or not isinstance(value, (int, float, list)):
            raise ConfigError(f"{path}: expected a number or nested list, got {type(value).__name__}")
        return float(value) if isinstance(value, (int, float)) else value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {type(value).__name__}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        return value
    raise ConfigError(f"{path}: unsupported value")


def _check_range(section, key, value):
    path = f"{section}.{key}"
    if key in _POSITIVE and not value > 0:
        raise ConfigError(f"{path}: must be positive, got {value}")
    if key == "damping" and value > 1:
        raise ConfigError(f"{path}: must lie in (0, 1], got {value}")
    if key == "seed" and not 0 <= value < 2**64:
        raise ConfigError(f"{path}: must be an unsigned 64-bit integer, got {value}")
    if key in ("n", "n_x", "n_z") and value < 5:
        raise ConfigError(f"{path}: needs at least 5 nodes, got {value}")
    if key == "mass_floor" and not 0 <= value < 1:
        raise ConfigError(f"{path}: must lie in [0, 1), got {value}")
    choices = _CHOICES.get((section, key))
    if choices and value not in choices:
        raise ConfigError(f"{path}: must be one of {choices}, got {value!r}")


def resolve(experiment, overrides=None):
    """Merge ``overrides`` into the experiment defaults; returns ``(config, defaults_used)``.

    ``defaults_used`` lists the dotted keys that kept their default value.
    """
    if experiment not in DEFAULTS:
        raise ConfigError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    overrides = {} if overrides is None else overrides
    if not isinstance(overrides, dict):
        raise ConfigError(f"config root must be a mapping, got {type(overrides).__name__}")
    cfg = copy.deepcopy(DEFAULTS[experiment])
    for section, body in overrides.items():
        if section not in cfg:
            raise ConfigError(f"{section}: unknown section for {experiment} (known: {sorted(cfg)})")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: expected a mapping, got {type(body).__name__}")
        for key, value in body.items():
            if key not in cfg[section]:
                raise ConfigError(f"{section}.{key}: unknown key (known: {sorted(cfg[section])})")
            cfg[section][key] = _check_type(f"{section}.{key}", cfg[section][key], value, key)
    used = []
    for section, body in cfg.items():
        for key, value in body.items():
            if key not in _MATRIX_KEYS:
                _check_range(section, key, value)
            given = isinstance(overrides.get(section), dict) and key in overrides[section]
            if not given:
                used.append(f"{section}.{key}")
                log.info("default %s.%s = %r", section, key, value)
    return cfg, used


def parse_config(path, experiment):
    """Read a YAML file (may be empty) and resolve it against ``experiment``'s defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return resolve(experiment, doc)
