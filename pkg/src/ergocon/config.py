"""Experiment configuration: YAML loading, schema validation and resolution to concrete objects.

Resolution order: observation schedule, then bandwidth and kernel (hence the
nu-vector), then ergodicity constants and the constants table.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import warnings
from dataclasses import dataclass

import jsonschema
import numpy as np
import yaml

from .constants import ConstantsTable, ErgodicityConstants, build_table
from .model import ClassParams, DiffusionModel, build_model
from .sde import ObservationScheme, ScheduleParams, schedule_from_T
from .testfn import KERNELS, KernelSpec, TestFunction, kernel_from_csv, tanh_function


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "scheme"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name", "class_params"],
            "properties": {
                "name": {"type": "string"},
                "params": {"type": "object", "additionalProperties": _NUM},
                "class_params": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["x_star", "M", "L", "sigma_min", "sigma_max"],
                    "properties": {k: _POS for k in ("x_star", "M", "L", "sigma_min", "sigma_max")},
                },
                "y0": _NUM,
            },
        },
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"type": "string"},
                "csv": {"type": "string"},
                "h": {"oneOf": [_POS, {"type": "string", "enum": ["auto"]}]},
                "x0": _NUM,
            },
        },
        "scheme": {
            "type": "object",
            "additionalProperties": False,
            "required": ["T"],
            "properties": {
                "T": {"type": "number", "minimum": 1},
                "delta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "iota": _POS,
                "substeps": {"type": "integer", "minimum": 1},
            },
        },
        "ergodicity": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["R", "kappa"],
                    "properties": {"R": {"type": "number", "minimum": 1}, "kappa": _POS},
                },
                {"type": "string", "enum": ["calibrate"]},
            ]
        },
        "calibration": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x_list": {"type": "array", "items": _NUM, "minItems": 1},
                "t_max": _POS,
                "t_step": _POS,
                "n_rep": {"type": "integer", "minimum": 10},
            },
        },
        "mc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_rep": {"type": "integer", "minimum": 1},
                "base_seed": {"type": "integer", "minimum": 0},
                "statistics": {"type": "array", "items": {"enum": ["D_T", "Delta_T"]}, "minItems": 1},
                "z_grid": {"oneOf": [{"type": "array", "items": _NUM, "minItems": 1}, {"enum": ["auto"]}]},
                "z_points": {"type": "integer", "minimum": 2},
                "z_sd_span": _POS,
                "a_grid": {"type": "array", "items": _NUM, "minItems": 1},
                "n_paths": {"type": "integer", "minimum": 1},
                "tolerance": _POS,
                "eps": _POS,
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r_bound_override": _POS,
                "moment_orders": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 4}},
                "moment_times": {"type": "array", "items": _POS},
                "moment_n_rep": {"type": "integer", "minimum": 10},
                "ito_paths": {"type": "integer", "minimum": 1},
                "burkholder_n_rep": {"type": "integer", "minimum": 10},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}

DEFAULTS = {
    "kernel": {"name": "bump3", "h": "auto", "x0": 0.0},
    "ergodicity": {"R": 10.0, "kappa": 0.5},
    "calibration": {"x_list": [-2.0, 2.0], "t_max": 4.0, "t_step": 0.25, "n_rep": 4000},
    "mc": {
        "n_rep": 2000,
        "base_seed": 20240101,
        "statistics": ["D_T", "Delta_T"],
        "z_grid": "auto",
        "z_points": 20,
        "z_sd_span": 6.0,
        "n_paths": 1,
        "tolerance": 0.15,
        "eps": 0.1,
    },
    "verify": {
        "moment_orders": [1, 2, 3],
        "moment_times": [1.0, 5.0, 25.0],
        "moment_n_rep": 10000,
        "ito_paths": 100,
        "burkholder_n_rep": 100000,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict) -> None:
    """Schema validation; errors carry the offending key path."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def load_config(path) -> dict:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config error at <root>: expected a mapping")
    validate(raw)
    return raw


def with_defaults(raw: dict) -> dict:
    merged = copy.deepcopy(raw)
    for k, v in DEFAULTS.items():
        if k == "ergodicity" and k in raw:
            continue
        merged[k] = _merge(v, raw.get(k, {})) if isinstance(v, dict) else raw.get(k, v)
    merged.setdefault("output", {})
    merged["model"].setdefault("params", {})
    merged["model"].setdefault("y0", 0.0)
    merged["scheme"].setdefault("substeps", 16)
    return merged


def config_hash(cfg: dict) -> str:
    """Hash of the experiment-defining content (output location excluded)."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Resolved:
    cfg: dict
    model: DiffusionModel
    class_params: ClassParams
    scheme: ObservationScheme
    schedule: ScheduleParams | None
    psi: TestFunction
    kernel: KernelSpec
    erg: ErgodicityConstants
    calibration: object | None
    table: ConstantsTable

    @property
    def hash(self) -> str:
        return config_hash(self.cfg)


def resolve_bandwidth(h, T: float) -> float:
    """``"auto"`` gives ``T^{-1/3}``; any bandwidth must satisfy ``T^{-1/2} <= h < 1``."""
    h = T ** (-1.0 / 3.0) if h == "auto" else float(h)
    if h < T ** -0.5:
        raise ConfigError(f"bandwidth h={h:g} below the guard T^(-1/2)={T ** -0.5:g}")
    if not h < 1:
        raise ConfigError(f"bandwidth h={h:g} must be < 1")
    return h


def resolve(raw: dict, calibrate_fn=None) -> Resolved:
    """Turn a validated config into concrete model, scheme, kernel and constants."""
    cfg = with_defaults(raw)
    m = cfg["model"]
    try:
        cp = ClassParams(**m["class_params"])
        model = build_model(m["name"], cp, m["params"], m["y0"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"config error at model: {exc}") from None
    s = cfg["scheme"]
    if ("delta" in s) == ("iota" in s):
        raise ConfigError("config error at scheme: give exactly one of delta or iota")
    schedule = None
    if "iota" in s:
        schedule = schedule_from_T(s["T"], s["iota"])
        delta = schedule.delta_T
    else:
        delta = s["delta"]
    scheme = ObservationScheme(s["T"], delta, s["substeps"])
    k = cfg["kernel"]
    if "csv" in k:
        psi = kernel_from_csv(k["csv"])
    elif k["name"] in KERNELS:
        psi = KERNELS[k["name"]]()
    else:
        raise ConfigError(f"config error at kernel/name: unknown kernel {k['name']!r}")
    h = resolve_bandwidth(k["h"], s["T"])
    kernel = KernelSpec(psi, h, k["x0"])
    calibration = None
    if cfg["ergodicity"] == "calibrate":
        calibration = (calibrate_fn or calibrate)(model, cfg)
        erg = ErgodicityConstants(calibration.R_hat, calibration.kappa_hat)
    else:
        erg = ErgodicityConstants(**cfg["ergodicity"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = build_table(cp, model.y0, erg, psi, h, k["x0"], delta, s["T"])
    return Resolved(cfg, model, cp, scheme, schedule, psi, kernel, erg, calibration, table)


def calibrate(model: DiffusionModel, cfg: dict):
    from .rng import derive_seed
    from .stats import geometric_ergodicity_estimate

    c = cfg["calibration"]
    t_grid = np.arange(0.0, c["t_max"] + 1e-9, c["t_step"])
    delta = c["t_step"] / max(1, math.ceil(c["t_step"] / 0.05))
    return geometric_ergodicity_estimate(model, tanh_function(), c["x_list"], t_grid, c["n_rep"],
                                         derive_seed(cfg["mc"]["base_seed"], 2**32 - 1), delta=delta)
