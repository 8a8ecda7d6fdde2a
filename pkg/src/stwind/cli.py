"""Command-line entry point.

Subcommands: backtest, simulate, map, power.  Exit codes: 0 ok, 2 config
error, 3 data error, 4 numerical failure, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import backtest as bt
from . import evaluation, features, synth
from .config import load_config, require_data_paths
from .data import align, load_nwp, load_observations, load_sites, parse_timestamp
from .errors import (
    ConfigError,
    DataError,
    FitError,
    NumericalError,
    SizeLimitError,
    StwindError,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _load_dataset(cfg):
    require_data_paths(cfg, "observations", "nwp", "sites")
    sites = load_sites(cfg.data["sites"])
    obs = load_observations(cfg.data["observations"], sites=sites)
    nwp = load_nwp(cfg.data["nwp"], sites=sites)
    if "window_start" in cfg.data:
        t_start = parse_timestamp(cfg.data["window_start"])
    else:
        t_start = max(series.grid.origin for series in obs)
    if "window_end" in cfg.data:
        t_end = parse_timestamp(cfg.data["window_end"])
    else:
        t_end = min(series.grid.time_at(series.grid.length - 1) for series in obs)
    return align(obs, nwp, (t_start, t_end))


def cmd_backtest(cfg, args):
    ds = _load_dataset(cfg)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records, audits, failures = bt.run_backtest(
        ds, cfg.backtest, continue_on_error=args.continue_on_error
    )
    evaluation.write_records_csv(out / "records.csv", records)
    audit_dir = out / "audit"
    audit_dir.mkdir(exist_ok=True)
    for audit in audits:
        path = audit_dir / f"roll_{audit['t_index']:06d}.json"
        path.write_text(json.dumps(audit, sort_keys=True, indent=2))
    models = [m for m in cfg.backtest.models]
    mae = evaluation.mae_table(records, models=models)
    for site, table in mae.items():
        evaluation.write_metric_csv(out / f"metrics_mae_{site}.csv", table, models, "hour")
    prob_models = [m for m in models if m in (bt.MODEL_FULL, bt.MODEL_GOP)]
    if prob_models:
        crps = evaluation.crps_table(records, models=prob_models)
        for site, table in crps.items():
            evaluation.write_metric_csv(
                out / f"metrics_crps_{site}.csv", table, prob_models, "hour"
            )
    summary = {
        "rolls": len(audits),
        "records": len(records),
        "failures": failures,
        "models": models,
        "sites": [s.id for s in ds.sites],
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    print(f"backtest: {len(audits)} rolls, {len(records)} records -> {out}")
    return EXIT_OK


def cmd_simulate(cfg, args):
    out = Path(args.out or cfg.out)
    paths = synth.generate(cfg.simulate, cfg.seed, out)
    print("simulate: wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_map(cfg, args):
    ds = _load_dataset(cfg)
    needed = {"lat_min", "lat_max", "lon_min", "lon_max", "ny", "nx"}
    missing = needed - set(cfg.map)
    if missing:
        raise ConfigError(f"[map] missing keys {sorted(missing)}")
    issue = parse_timestamp(args.issue)
    t_c = ds.grid.index_of(issue)
    bcfg = cfg.backtest
    if t_c < bcfg.training_steps - 1 or t_c + bcfg.horizon_steps > ds.grid.length - 1:
        raise ConfigError(
            f"issue {args.issue} outside the backtest range of this dataset"
        )
    if not 1 <= args.horizon <= bcfg.horizon_steps:
        raise ConfigError(f"horizon must be in 1..{bcfg.horizon_steps}")
    pool = features.build_candidates(ds, max_lag=bcfg.max_lag, diff_lags=bcfg.diff_lags)
    state = bt.fit_roll(ds, bcfg, pool, t_c)
    lats = np.linspace(cfg.map["lat_min"], cfg.map["lat_max"], cfg.map["ny"])
    lons = np.linspace(cfg.map["lon_min"], cfg.map["lon_max"], cfg.map["nx"])
    rows = bt.forecast_map(state, ds, bcfg, lats, lons, args.horizon)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = args.issue.replace(":", "").replace("-", "")
    path = out / f"map_{stamp}_h{args.horizon:02d}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lat", "lon", "mean", "sd"])
        for lat, lon, mean, sd in rows:
            writer.writerow([f"{lat:.6f}", f"{lon:.6f}", f"{mean:.6f}", f"{sd:.6f}"])
    print(f"map: wrote {path}")
    return EXIT_OK


def cmd_power(cfg, args):
    curve_path = args.curve or cfg.power.get("curve")
    records_path = args.records or cfg.power.get("records")
    if not curve_path:
        raise ConfigError("power: a speed-power CSV is required ([power] curve or --curve)")
    if not records_path:
        raise ConfigError("power: a records CSV is required ([power] records or --records)")
    for path in (curve_path, records_path):
        if not Path(path).exists():
            raise DataError(f"file not found: {path}")
    speeds = []
    powers = []
    with open(curve_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"speed_ms", "power_norm"}.issubset(reader.fieldnames or ()):
            raise DataError("speed-power CSV needs columns speed_ms,power_norm")
        for row in reader:
            speeds.append(float(row["speed_ms"]))
            powers.append(float(row["power_norm"]))
    curve = evaluation.power_curve_from_bins(np.array(speeds), np.array(powers))
    records = evaluation.read_records_csv(records_path)
    models = sorted({r.model for r in records})
    tables = evaluation.pce_table(records, curve, models=models)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "power_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["speed_ms", "power_norm"])
        for s, p in zip(curve.centers, curve.power):
            writer.writerow([f"{s:.2f}", f"{p:.6f}"])
    for site, table in tables.items():
        evaluation.write_pce_csv(out / f"pce_{site}.csv", table, models)
    print(f"power: wrote curve and PCE tables -> {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stwind",
        description="Spatio-temporal wind forecasting: NWP calibration + advective GP",
    )
    parser.add_argument("--config", required=True, help="path to the run config file")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--out", help="override [run] out directory")
    parser.add_argument("--jobs", type=int, help="override [run] jobs")
    parser.add_argument(
        "--continue-on-error",
        action="store_true",
        help="log failed rolls and keep going",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("backtest", help="run the rolling backtest")
    sub.add_parser("simulate", help="write a synthetic dataset")
    map_p = sub.add_parser("map", help="gridded forecast field for one roll")
    map_p.add_argument("--issue", required=True, help="forecast origin (ISO-8601 UTC)")
    map_p.add_argument("--horizon", required=True, type=int, help="look-ahead steps (10-min)")
    power_p = sub.add_parser("power", help="fit a power curve and score PCE")
    power_p.add_argument("--curve", help="speed-power CSV (speed_ms,power_norm)")
    power_p.add_argument("--records", help="forecast records CSV")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs is not None:
            cfg.jobs = args.jobs
            cfg.backtest = replace(cfg.backtest, jobs=args.jobs)
        handler = {
            "backtest": cmd_backtest,
            "simulate": cmd_simulate,
            "map": cmd_map,
            "power": cmd_power,
        }[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, FitError, SizeLimitError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except FileNotFoundError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except StwindError as exc:
        log.error("%s", exc)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
