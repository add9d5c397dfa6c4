"""Run configuration: YAML sections resolved into the library's config objects."""

from __future__ import annotations

import copy
import json
import re
from pathlib import Path
from typing import Any

import yaml

from .core import CORE_PARAMS, ModelOptions
from .evaluation import DEFAULT_LANDSCAPE_GRID, NoiseSpec
from .ga import GaConfig
from .objective import LossConfig
from .rho import DEFAULT_HORIZONS_MIN
from .solver import LineSearchConfig, SolverConfig

DEFAULTS: dict[str, Any] = {
    "model": {"fd_form": "typeset", "speed_floor": 0.0, "density_floor": 0.0},
    "loss": {"speed_weight": 1.0, "density_weight": 0.0, "flow_weight": 0.0},
    "bounds": {},
    "warm_start": {},
    "solver": {"max_iterations": 200, "tolerance": 1e-12, "history_size": 10, "ftol": 1e-12, "xtol": 1e-12,
               "gradient": "exact", "line_search": {}},
    "rho": {"control_horizon_min": 15, "prediction_horizon_min": 20, "control_horizon_steps": None,
            "prediction_horizon_steps": None, "jump_penalty_weight": 1.0, "reanchor": False, "jump_cap": None},
    "ga": {},
    "noise": {"levels": [1e-9, 1e-6, 1e-4, 1e-3, 1e-2, 5e-2], "samples_per_level": 1000},
    "landscape": {"segment_index": 0, "grid": list(DEFAULT_LANDSCAPE_GRID), "params": list(CORE_PARAMS)},
    "horizon_sweep": {"pairs_min": [list(p) for p in DEFAULT_HORIZONS_MIN]},
    "smoothing": {"window": 5},
    "synth": {},
}


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent-only floats such as ``1e-12``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                |\.[0-9_]+(?:[eE][-+][0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


# sections whose keys are free-form (parameter names or dataclass fields)
OPEN_SECTIONS = ("bounds", "warm_start", "ga", "synth", "solver.line_search")


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base and where not in OPEN_SECTIONS:
            raise ConfigError(f"unknown config key {path}")
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, path)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None) -> dict:
    """Defaults overlaid with a YAML file (or the ``config`` section of a run manifest)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    try:
        text = p.read_text()
        doc = (json.loads(text) if p.suffix == ".json" else yaml.load(text, Loader=_Loader)) or {}
    except (OSError, ValueError, yaml.YAMLError) as err:
        raise ConfigError(f"{p}: {err}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    if "command" in doc and "config" in doc:
        doc = doc["config"]
    return _merge(DEFAULTS, doc)


def model_options(cfg: dict, strict: bool = False) -> ModelOptions:
    try:
        return ModelOptions(strict=strict, **cfg["model"])
    except (TypeError, ValueError) as err:
        raise ConfigError(f"model: {err}") from None


def loss_config(cfg: dict) -> LossConfig:
    try:
        return LossConfig(**cfg["loss"])
    except TypeError as err:
        raise ConfigError(f"loss: {err}") from None


def solver_config(cfg: dict, seed: int = 0) -> SolverConfig:
    s = dict(cfg["solver"])
    try:
        ls = LineSearchConfig(**s.pop("line_search", {}))
        return SolverConfig(line_search=ls, seed=seed, **s)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"solver: {err}") from None


def ga_config(cfg: dict, seed: int = 0) -> GaConfig:
    try:
        return GaConfig(**{**cfg["ga"], "seed": seed})
    except (TypeError, ValueError) as err:
        raise ConfigError(f"ga: {err}") from None


def noise_spec(cfg: dict, seed: int = 0) -> NoiseSpec:
    try:
        return NoiseSpec(tuple(cfg["noise"]["levels"]), int(cfg["noise"]["samples_per_level"]), seed)
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"noise: {err}") from None
