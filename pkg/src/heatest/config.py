"""TOML run configuration: defaults, overrides and validation.

Every subcommand reads the same document. Missing tables fall back to the
desk-scale defaults below; unknown keys and malformed values raise
ConfigError, which the command line maps to exit code 2.
"""

from __future__ import annotations

import copy
import math
import sys
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .estimator import EstimatorConfig
from .experiments import PROFILE_POINTS, Model
from .grid import DiffusivityField

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "load_config",
    "parse_config",
    "apply_override",
    "build_model",
    "build_estimator",
]


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


DEFAULTS: dict = {
    "model": {
        "theta": {"kind": "constant", "params": {"value": 0.02}},
        "sigma": 10.0,
        "T": 1.0,
        "nx": 512,
        "dt": 4e-6,
        "noise_multiplier": 1.0,
    },
    "noise": {"epsilon": 4e-4},
    "estimator": {
        "x0": 0.5,
        "h": "auto",
        "gamma": 1.0,
        "weights": "uniform",
        "margin_factor": 0.1,
        "delta_variant": "sqrt_eps",
        "derivatives": "grid",
        "kernel": {"family": "paper-bump", "delta_order": 0},
        "ci_level": 0.95,
    },
    "simulate": {"csv_t_stride": 0, "csv_x_stride": 8, "write_signal": True},
    "study": {
        "deltas": [0.05, 0.02, 0.01],
        "replications": 100,
        "modes": ["parametric", "lipschitz"],
        "x0": 0.5,
        "check": False,
        "parametric_band": [0.6, 0.9],
        "lipschitz_band": [0.35, 0.65],
    },
    "profile": {
        "theta": {"kind": "two_plateau", "params": {}},
        "deltas": [0.04, 0.02, 0.01],
        "replications": 1,
        "x0": list(PROFILE_POINTS),
        "h_rule": "cube_root",
        "diagnostic": True,
    },
    "oracle": {
        "covariance_paths": 200,
        "covariance_delta": 0.05,
        "n_modes": 4096,
        "tk_constant_deltas": [0.1, 0.09, 0.08, 0.07, 0.06, 0.05],
        "tk_hetero_h": [0.016, 0.008, 0.004, 0.002],
        "tk_hetero_delta": 2.5e-4,
        "tk_hetero_x0": 0.35,
        "tk_time": 1.0,
    },
    "run": {"seed": 0, "threads": 1, "out": "heatest-out"},
}

_REQUIRED_MODEL_KEYS = ("theta", "sigma")


def _merge(base: dict, new: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in new.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(base[key], dict) and key != "params" and not (key == "theta"):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_config(doc: dict) -> dict:
    """Merge a parsed TOML document over the defaults and validate it."""
    if "model" not in doc:
        raise ConfigError("missing table 'model'")
    for key in _REQUIRED_MODEL_KEYS:
        if key not in doc["model"]:
            raise ConfigError(f"missing key 'model.{key}'")
    cfg = _merge(DEFAULTS, doc)
    validate(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> dict:
    """Apply ``dotted.key=value``; the value is read as TOML, else as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, text = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown key {key!r}")
        node = node[p]
    if not isinstance(node, dict) or (parts[-1] not in node and "params" not in parts):
        raise ConfigError(f"unknown key {key!r}")
    node[parts[-1]] = _parse_value(text.strip())
    validate(cfg)
    return cfg


def _positive(cfg, table, key):
    v = cfg[table][key]
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not (v > 0 and math.isfinite(v)):
        raise ConfigError(f"'{table}.{key}' must be a positive number, got {v!r}")


def validate(cfg: dict) -> None:
    for key in ("sigma", "T", "dt"):
        if key == "sigma":
            v = cfg["model"]["sigma"]
            if not isinstance(v, (int, float)) or v < 0:
                raise ConfigError(f"'model.sigma' must be non-negative, got {v!r}")
        else:
            _positive(cfg, "model", key)
    if not isinstance(cfg["model"]["nx"], int) or cfg["model"]["nx"] < 3:
        raise ConfigError("'model.nx' must be an integer >= 3")
    for table in ("model", "profile"):
        th = cfg[table]["theta"]
        if not isinstance(th, dict) or "kind" not in th:
            raise ConfigError(f"'{table}.theta' must be a table with a 'kind' key")
        try:
            DiffusivityField.from_spec(th)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"'{table}.theta': {exc}") from exc
    try:
        build_model(cfg)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    est = cfg["estimator"]
    if est["weights"] not in ("uniform", "loclin"):
        raise ConfigError("'estimator.weights' must be 'uniform' or 'loclin'")
    if not (est["h"] == "auto" or (isinstance(est["h"], (int, float)) and 0 < est["h"] <= 1)):
        raise ConfigError("'estimator.h' must be 'auto' or a number in (0, 1]")
    if est["kernel"].get("family") not in ("paper-bump", "bump"):
        raise ConfigError("'estimator.kernel.family' must be 'bump'")
    if not isinstance(est["kernel"].get("delta_order", 0), int) or est["kernel"].get("delta_order", 0) < 0:
        raise ConfigError("'estimator.kernel.delta_order' must be a non-negative integer")
    _positive(cfg, "noise", "epsilon")
    st = cfg["study"]
    if not st["deltas"] or any(not (isinstance(d, (int, float)) and 0 < d < 0.5) for d in st["deltas"]):
        raise ConfigError("'study.deltas' must be a non-empty list of numbers in (0, 0.5)")
    if set(st["modes"]) - {"parametric", "lipschitz"} or not st["modes"]:
        raise ConfigError("'study.modes' must be a subset of ['parametric', 'lipschitz']")
    for table in ("study", "profile"):
        n = cfg[table]["replications"]
        if not isinstance(n, int) or n < 1:
            raise ConfigError(f"'{table}.replications' must be a positive integer")
    if cfg["profile"]["h_rule"] not in ("cube_root", "auto"):
        raise ConfigError("'profile.h_rule' must be 'cube_root' or 'auto'")
    run = cfg["run"]
    if not isinstance(run["seed"], int) or not 0 <= run["seed"] < 2**64:
        raise ConfigError("'run.seed' must be an unsigned 64-bit integer")
    if not isinstance(run["threads"], int) or run["threads"] < 1:
        raise ConfigError("'run.threads' must be a positive integer")


def build_model(cfg: dict, table: str = "model") -> Model:
    m = cfg["model"]
    theta = DiffusivityField.from_spec(cfg[table]["theta"])
    return Model(theta, float(m["sigma"]), float(m["T"]), int(m["nx"]), float(m["dt"]), float(m["noise_multiplier"]))


def build_estimator(cfg: dict, epsilon: float, **changes) -> EstimatorConfig:
    e = cfg["estimator"]
    kw = dict(
        eps=float(epsilon),
        x0=float(e["x0"]),
        h=e["h"] if e["h"] == "auto" else float(e["h"]),
        weight_scheme=e["weights"],
        gamma=float(e["gamma"]),
        margin_factor=float(e["margin_factor"]),
        delta_variant=e["delta_variant"],
        sigma=float(cfg["model"]["sigma"]) or 1.0,
        derivatives=e["derivatives"],
        kernel_family="bump",
        delta_order=int(e["kernel"].get("delta_order", 0)),
    )
    kw.update(changes)
    try:
        return EstimatorConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"estimator: {exc}") from exc
