"""Run configuration: flat `key = value` sections, strictly validated.

Unknown sections or keys are rejected so typos fail fast.  All randomness in
a run flows from the single [run] seed, fanned out to fixed named streams so
editing unrelated config keys never perturbs another module's draws.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .backtest import ALL_MODELS, BacktestConfig
from .errors import ConfigError, DataError, ValidationError
from .synth import SimulateConfig

#: fixed stream indices for seed fan-out
STREAM_TRAJECTORIES = 10


def stream_rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


_SCHEMA = {
    "data": {
        "observations": str,
        "nwp": str,
        "sites": str,
        "window_start": str,
        "window_end": str,
    },
    "backtest": {
        "training_steps": int,
        "horizon_steps": int,
        "stride": int,
        "threshold": float,
        "models": str,
        "max_lag": int,
        "diff_lags": int,
        "subhourly_exclusion": bool,
        "maxfev": int,
        "max_rolls": int,
        "advection_scale": float,
    },
    "run": {"seed": int, "jobs": int, "out": str},
    "map": {
        "lat_min": float,
        "lat_max": float,
        "lon_min": float,
        "lon_max": float,
        "ny": int,
        "nx": int,
    },
    "simulate": {
        "n_sites": int,
        "days": int,
        "spacing_km": float,
        "lat0": float,
        "lon0": float,
        "origin": str,
        "alpha": float,
        "lam": float,
        "r_s": float,
        "r_t": float,
        "delta": float,
        "advect_u": float,
        "advect_v": float,
        "advect_spread": float,
        "base": float,
        "diurnal_amp": float,
        "synoptic_amp": float,
        "bias_add": float,
        "bias_mult": float,
        "bias_shift_steps": int,
        "smooth_steps": int,
        "missing_fraction": float,
        "pressure_grad_x": float,
        "pressure_grad_y": float,
    },
    "power": {"curve": str, "records": str},
}


@dataclass
class RunConfig:
    data: dict
    backtest: BacktestConfig
    seed: int
    jobs: int
    out: str
    map: dict
    simulate: SimulateConfig
    power: dict


def _parse_value(raw, kind, section, key):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def load_config(path):
    """Parse and validate a config file into a RunConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not read:
        raise ConfigError(f"config file not found: {path}")

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[section][key] = _parse_value(raw, _SCHEMA[section][key], section, key)

    run = values.get("run", {})
    bt_values = dict(values.get("backtest", {}))
    if "models" in bt_values:
        models = tuple(m.strip() for m in bt_values["models"].split(",") if m.strip())
        unknown = set(models) - set(ALL_MODELS)
        if unknown:
            raise ConfigError(f"unknown models {sorted(unknown)}; choose from {ALL_MODELS}")
        bt_values["models"] = models
    bt_values["jobs"] = run.get("jobs", 1)
    try:
        backtest_cfg = BacktestConfig(**bt_values)
    except ValidationError as exc:
        raise ConfigError(f"[backtest] {exc}") from None

    sim_values = values.get("simulate", {})
    known_sim = {f.name for f in fields(SimulateConfig)}
    try:
        simulate_cfg = SimulateConfig(**{k: v for k, v in sim_values.items() if k in known_sim})
    except ValidationError as exc:
        raise ConfigError(f"[simulate] {exc}") from None

    return RunConfig(
        data=values.get("data", {}),
        backtest=backtest_cfg,
        seed=run.get("seed", 0),
        jobs=run.get("jobs", 1),
        out=run.get("out", "out"),
        map=values.get("map", {}),
        simulate=simulate_cfg,
        power=values.get("power", {}),
    )


def require_data_paths(cfg, *keys):
    """Missing key is a config error; missing file is a data error."""
    for key in keys:
        if key not in cfg.data:
            raise ConfigError(f"[data] {key} is required for this command")
        if not Path(cfg.data[key]).exists():
            raise DataError(f"[data] {key}: file not found: {cfg.data[key]}")
