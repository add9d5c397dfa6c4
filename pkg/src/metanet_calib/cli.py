"""Command-line front end: ``metanet-calib <command> [options]``.

Every command writes its outputs and a ``manifest.json`` into ``--out-dir``
(default ``$METANET_OUT_DIR/<command>`` or ``runs/<command>``);
``metanet-calib replay MANIFEST`` re-runs a recorded command. Exit codes:
0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .calibration import calibrate_static
from .config import ConfigError
from .core import PARAM_NAMES, NumericalError, ParameterSchedule, simulate
from .dataio import (
    DataError,
    RunManifest,
    load_scenario,
    read_schedule,
    save_landscape,
    save_result,
    save_robustness,
    save_scenario,
    write_grid,
    write_schedule,
    write_table,
)
from .evaluation import fd_points, landscape_sweep, robustness_sweep, smooth_boundaries
from .ga import calibrate_ga
from .params import Bounds, ParameterVector, default_free_mask, default_warm_start
from .rho import RhoConfig, calibrate_rho, horizon_sweep, minutes_to_steps
from .synthetic import PRESETS, build_scenario, preset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
OUT_DIR_ENV = "METANET_OUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# shared helpers


class Run:
    """Per-invocation context: resolved config, inputs consumed, outputs produced."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.cfg = config_mod.load_config(args.config)
        self.seed = args.seed
        self.out = Path(args.out_dir or Path(os.environ.get(OUT_DIR_ENV, "runs")) / args.command)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()
        self.options = config_mod.model_options(self.cfg, strict=args.strict_numerics)

    def scenario(self):
        if not getattr(self.args, "scenario", None):
            raise UsageError(f"{self.args.command}: --scenario is required")
        path = Path(self.args.scenario)
        self.inputs.append(path)
        return load_scenario(path)

    def bounds(self, geom):
        try:
            return Bounds.from_mapping(geom, self.cfg["bounds"])
        except (ValueError, TypeError) as err:
            raise ConfigError(f"bounds: {err}") from None

    def warm_start(self, geom, bounds):
        path = getattr(self.args, "warm_start", None)
        if path:
            blocks = self.schedule_from(path, geom).blocks[0]
        else:
            values = {k: float(v) for k, v in self.cfg["warm_start"].items()}
            if set(values) - set(PARAM_NAMES):
                raise ConfigError(f"warm_start: unknown names {sorted(set(values) - set(PARAM_NAMES))}")
            blocks = default_warm_start(geom, values)
        mask = default_free_mask(geom)
        return ParameterVector.from_blocks(np.where(mask, np.clip(blocks, bounds.lower, bounds.upper), blocks),
                                           bounds, mask)

    def schedule_from(self, path, geom) -> ParameterSchedule:
        p = Path(path)
        if p.is_dir():
            p = p / "schedule.csv"
        self.inputs.append(p)
        return read_schedule(p, geom.num_segments)

    def schedule(self, bundle) -> ParameterSchedule:
        if getattr(self.args, "schedule", None):
            return self.schedule_from(self.args.schedule, bundle.geometry)
        if bundle.truth is not None:
            return bundle.truth
        geom = bundle.geometry
        return ParameterSchedule.constant(self.warm_start(geom, self.bounds(geom)).blocks)

    def reference(self, bundle):
        if getattr(self.args, "against", "observed") == "truth":
            if bundle.truth_speed is None:
                raise DataError("scenario has no truth speed grid to score against")
            return bundle.truth_speed
        return None

    def emit(self, *paths):
        self.outputs.extend(Path(p) for p in paths)

    def manifest(self, exit_code):
        self.out.mkdir(parents=True, exist_ok=True)
        seeds = {"seed": self.seed}
        m = RunManifest.start(self.args.command, self.argv, self.cfg, seeds, self.inputs)
        m.finish(self.outputs, time.perf_counter() - self.t0, exit_code)
        return m.save(self.out)


def _save_result(run, result):
    paths = save_result(result, run.out)
    run.emit(*paths.values())
    print(f"{result.method}: loss {result.final_loss:.6g}, MAPE {result.final_mape:.4f}%, "
          f"{result.schedule.n_blocks} block(s), {result.termination_reason}")


def _rho_steps(run, dt):
    """Horizon lengths: flag steps, flag minutes, config steps, config minutes, in that order."""
    rc = run.cfg["rho"]
    a = run.args

    def pick(flag_steps, flag_min, key):
        if flag_steps is not None:
            return flag_steps
        if flag_min is not None:
            return minutes_to_steps(flag_min, dt)
        if rc.get(f"{key}_steps") is not None:
            return rc[f"{key}_steps"]
        return minutes_to_steps(rc[f"{key}_min"], dt)

    try:
        hc = pick(a.control_steps, a.control_min, "control_horizon")
        hp = pick(a.prediction_steps, a.prediction_min, "prediction_horizon")
    except (TypeError, ValueError) as err:
        raise ConfigError(f"rho: {err}") from None
    return int(hc), int(hp)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(run):
    """Generate a synthetic twin scenario."""
    sc = dict(run.cfg.get("synth") or {})
    name = run.args.preset or sc.pop("preset", None) or "small"
    noise = run.args.obs_noise if run.args.obs_noise is not None else sc.pop("obs_noise", None)
    if sc.get("geometry"):
        bundle = build_scenario(sc, name=name, seed=run.seed, obs_noise=noise)
    elif name in PRESETS:
        bundle = preset(name, seed=run.seed, obs_noise=noise)
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    save_scenario(bundle, run.out)
    run.emit(*(p for p in run.out.iterdir() if p.name != "manifest.json"))
    print(f"scenario {name}: {bundle.geometry.num_segments} segments, {bundle.horizon} steps -> {run.out}")


def cmd_simulate(run):
    """Roll the model forward under a schedule."""
    bundle = run.scenario()
    schedule = run.schedule(bundle)
    H = bundle.horizon if run.args.horizon is None else run.args.horizon
    if not 0 <= H <= bundle.horizon:
        raise DataError(f"horizon {H} outside [0, {bundle.horizon}]")
    traj = simulate(bundle.observed.initial_state, schedule, bundle.bc, bundle.geometry, run.options, horizon=H)
    run.out.mkdir(parents=True, exist_ok=True)
    for name, grid in (("density", traj.density), ("speed", traj.speed), ("flow", traj.flow)):
        run.emit(write_grid(run.out / f"{name}.csv", grid))
    run.emit(write_table(run.out / "clamp_events.csv", ["t_index", "clamp_events"],
                         [(t, int(c)) for t, c in enumerate(traj.clamp_events)]))
    print(f"simulated {H} steps, {traj.total_clamp_events} clamp events -> {run.out}")


def cmd_calibrate_static(run):
    """Fit one time-invariant parameter set."""
    bundle = run.scenario()
    geom = bundle.geometry
    bounds = run.bounds(geom)
    result = calibrate_static(bundle.observed, bundle.bc, geom, bounds, run.warm_start(geom, bounds),
                              config_mod.solver_config(run.cfg, run.seed), loss=config_mod.loss_config(run.cfg),
                              options=run.options)
    _save_result(run, result)


def cmd_calibrate_rho(run):
    """Fit a time-varying schedule by rolling horizons."""
    bundle = run.scenario()
    geom = bundle.geometry
    bounds = run.bounds(geom)
    hc, hp = _rho_steps(run, geom.time_step_s)
    rc = run.cfg["rho"]
    try:
        cfg = RhoConfig(hc, hp, jump_penalty_weight=float(rc["jump_penalty_weight"]), jump_cap=rc.get("jump_cap"),
                        reanchor=bool(rc.get("reanchor", False)),
                        inner_solver=config_mod.solver_config(run.cfg, run.seed))
    except ValueError as err:
        raise ConfigError(f"rho: {err}") from None
    result = calibrate_rho(bundle.observed, bundle.bc, geom, bounds, run.warm_start(geom, bounds), cfg,
                           loss=config_mod.loss_config(run.cfg), options=run.options)
    _save_result(run, result)


def cmd_calibrate_ga(run):
    """Genetic-algorithm baseline calibration."""
    bundle = run.scenario()
    geom = bundle.geometry
    bounds = run.bounds(geom)
    result = calibrate_ga(bundle.observed, bundle.bc, geom, bounds, config_mod.ga_config(run.cfg, run.seed),
                          warm_start=run.warm_start(geom, bounds), loss=config_mod.loss_config(run.cfg),
                          options=run.options, workers=run.args.workers)
    _save_result(run, result)


def cmd_horizon_sweep(run):
    """Rolling-horizon calibration over several horizon pairs."""
    bundle = run.scenario()
    geom = bundle.geometry
    bounds = run.bounds(geom)
    hs = run.cfg["horizon_sweep"]
    try:
        pairs = [(minutes_to_steps(c, geom.time_step_s), minutes_to_steps(p, geom.time_step_s))
                 for c, p in hs["pairs_min"]]
    except (ValueError, TypeError) as err:
        raise ConfigError(f"horizon_sweep: {err}") from None
    noise = config_mod.noise_spec(run.cfg, run.seed) if run.args.with_noise else None
    rows = horizon_sweep(bundle.observed, bundle.bc, geom, bounds, run.warm_start(geom, bounds), pairs,
                         config_mod.solver_config(run.cfg, run.seed),
                         jump_penalty_weight=float(run.cfg["rho"]["jump_penalty_weight"]),
                         loss=config_mod.loss_config(run.cfg), options=run.options, noise=noise,
                         workers=run.args.workers, reference_speed=run.reference(bundle))
    run.out.mkdir(parents=True, exist_ok=True)
    levels = list(noise.levels) if noise else []
    header = ["control_steps", "prediction_steps", "final_loss", "final_mape", "n_blocks", "incidents"]
    header += [f"avg_mape_{lv:g}" for lv in levels] + [f"max_mape_{lv:g}" for lv in levels] + ["error"]
    table = []
    for r in rows:
        d = r.as_dict()
        line = [r.control_steps, r.prediction_steps, d.get("final_loss", ""), d.get("final_mape", ""),
                d.get("n_blocks", ""), d.get("incidents", "")]
        if r.robustness is not None:
            line += list(r.robustness.average) + list(r.robustness.worst)
        else:
            line += [""] * (2 * len(levels))
        table.append(line + [r.error or ""])
        if r.result is not None:
            sub = run.out / f"hc{r.control_steps}_hp{r.prediction_steps}"
            sub.mkdir(exist_ok=True)
            run.emit(write_schedule(sub / "schedule.csv", r.result.schedule))
    run.emit(write_table(run.out / "horizon_sweep.csv", header, table))
    print(f"horizon sweep: {len(rows)} pairs -> {run.out}")


def cmd_robustness(run):
    """Monte-Carlo MAPE under inflow noise."""
    bundle = run.scenario()
    schedule = run.schedule(bundle)
    report = robustness_sweep(schedule, bundle.observed, bundle.bc, bundle.geometry,
                              config_mod.noise_spec(run.cfg, run.seed), options=run.options,
                              workers=run.args.workers, reference_speed=run.reference(bundle))
    run.emit(*save_robustness(report, run.out).values())
    for s in report.levels:
        print(f"sigma {s.level:g}: mean {s.mean:.4f}%, worst {s.worst:.4f}%, incidents {s.instability_incidents}")


def cmd_landscape(run):
    """MAPE change under one-parameter perturbations."""
    bundle = run.scenario()
    schedule = run.schedule(bundle)
    lc = run.cfg["landscape"]
    seg = run.args.segment if run.args.segment is not None else int(lc["segment_index"])
    try:
        report = landscape_sweep(schedule, bundle.observed, bundle.bc, bundle.geometry, seg, lc["grid"],
                                 tuple(lc["params"]), options=run.options,
                                 reference_speed=run.reference(bundle))
    except ValueError as err:
        raise ConfigError(f"landscape: {err}") from None
    run.emit(*save_landscape(report, run.out).values())
    print(f"landscape on segment {seg}: " + ", ".join(f"{k} {v:.3g}" for k, v in report.max_abs_delta().items()))


def cmd_fd_points(run):
    """Simulated density-flow points and fundamental diagrams."""
    bundle = run.scenario()
    schedule = run.schedule(bundle)
    geom = bundle.geometry
    traj = simulate(bundle.observed.initial_state, schedule, bundle.bc, geom, run.options, horizon=bundle.horizon)
    fd = fd_points(traj, geom, schedule, fd_form=run.options.fd_form)
    run.out.mkdir(parents=True, exist_ok=True)
    run.emit(write_table(run.out / "fd_points.csv", ["t_index", "segment", "density_vpkpl", "flow_vph"],
                         [(int(t), int(s), float(r), float(q)) for t, s, r, q in fd.points]))
    curve_rows = [(b, s, float(r), float(q)) for (b, s), c in sorted(fd.curves.items()) for r, q in c]
    run.emit(write_table(run.out / "fd_curves.csv", ["block", "segment", "density_vpkpl", "flow_vph"], curve_rows))
    print(f"fd points: {len(fd.points)} samples, {len(fd.curves)} curves -> {run.out}")


def cmd_smooth_bc(run):
    """Moving-average smoothing of the boundary series."""
    bundle = run.scenario()
    window = run.args.window if run.args.window is not None else int(run.cfg["smoothing"]["window"])
    try:
        bc = smooth_boundaries(bundle.bc, window)
    except ValueError as err:
        raise ConfigError(f"smoothing: {err}") from None
    meta = dict(bundle.metadata, smoothing_window=window)
    smoothed = type(bundle)(bundle.geometry, bundle.observed, bc, bundle.truth, bundle.truth_speed, meta)
    save_scenario(smoothed, run.out)
    run.emit(*(p for p in run.out.iterdir() if p.name != "manifest.json"))
    print(f"boundaries smoothed with window {window} -> {run.out}")


COMMANDS = {
    "synth": cmd_synth,
    "simulate": cmd_simulate,
    "calibrate-static": cmd_calibrate_static,
    "calibrate-rho": cmd_calibrate_rho,
    "calibrate-ga": cmd_calibrate_ga,
    "horizon-sweep": cmd_horizon_sweep,
    "robustness": cmd_robustness,
    "landscape": cmd_landscape,
    "fd-points": cmd_fd_points,
    "smooth-bc": cmd_smooth_bc,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--scenario", help="scenario directory or scenario.yaml")
    common.add_argument("--config", help="YAML config file (a manifest.json also works)")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV}/<command> or runs/<command>)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for sweeps (default 1)")
    common.add_argument("--strict-numerics", action="store_true", help="fail on any negative or non-finite state")

    parser = _Parser(prog="metanet-calib", description="METANET simulation and calibration experiments.",
                     epilog="metanet-calib replay MANIFEST [--out-dir DIR] re-runs a recorded command. "
                            "Exit codes: 0 ok, 1 usage or config, 2 data, 3 numerical.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    p = {name: sub.add_parser(name, parents=[common], help=fn.__doc__ or name.replace("-", " "))
         for name, fn in COMMANDS.items()}

    p["synth"].add_argument("--preset", help=f"one of {sorted(PRESETS)} (default small)")
    p["synth"].add_argument("--obs-noise", type=float, help="relative std of speed observation noise")
    p["simulate"].add_argument("--horizon", type=int, help="steps to simulate (default: scenario horizon)")
    for name in ("simulate", "robustness", "landscape", "fd-points"):
        p[name].add_argument("--schedule", help="schedule CSV or a calibration output directory")
    for name in ("calibrate-static", "calibrate-rho", "calibrate-ga", "horizon-sweep"):
        p[name].add_argument("--warm-start", help="schedule CSV whose first block is the warm start")
    for name in ("robustness", "landscape", "horizon-sweep"):
        p[name].add_argument("--against", choices=("observed", "truth"), default="observed",
                             help="speed grid to score MAPE against")
    rho = p["calibrate-rho"]
    rho.add_argument("--control-min", type=float, help="control horizon in minutes")
    rho.add_argument("--prediction-min", type=float, help="prediction horizon in minutes")
    rho.add_argument("--control-steps", type=int, help="control horizon in steps (overrides minutes)")
    rho.add_argument("--prediction-steps", type=int, help="prediction horizon in steps (overrides minutes)")
    p["horizon-sweep"].add_argument("--with-noise", action="store_true",
                                    help="also run the robustness sweep for every horizon pair")
    p["landscape"].add_argument("--segment", type=int, help="segment index to perturb (default from config)")
    p["smooth-bc"].add_argument("--window", type=int, help="moving-average window in steps (default from config)")
    return parser


def replay_argv(manifest_path, out_dir=None) -> list[str]:
    """Argument list that re-runs a recorded command with its resolved config."""
    m = RunManifest.load(manifest_path)
    argv, skip = [], False
    for tok in m.argv:
        if skip:
            skip = False
            continue
        if tok in ("--config", "--out-dir"):
            skip = True
            continue
        if tok.startswith(("--config=", "--out-dir=")):
            continue
        argv.append(tok)
    path = Path(manifest_path)
    argv += ["--config", str(path / "manifest.json" if path.is_dir() else path)]
    if out_dir:
        argv += ["--out-dir", str(out_dir)]
    return argv


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["replay"]:
        if len(argv) not in (2, 4) or (len(argv) == 4 and argv[2] != "--out-dir"):
            print("usage: metanet-calib replay MANIFEST [--out-dir DIR]", file=sys.stderr)
            return EXIT_USAGE
        try:
            argv = replay_argv(argv[1], argv[3] if len(argv) == 4 else None)
        except (OSError, ValueError, TypeError) as err:
            print(f"data error: {err}", file=sys.stderr)
            return EXIT_DATA
    parser = build_parser()
    run = None
    try:
        args = parser.parse_args(argv)
        if args.workers < 1:
            parser.error("--workers must be at least 1")
        run = Run(args, argv)
        COMMANDS[args.command](run)
        code = EXIT_OK
    except SystemExit as err:  # --help
        return int(err.code or 0)
    except (UsageError, ConfigError) as err:
        print(err, file=sys.stderr)
        code = EXIT_USAGE
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        code = EXIT_NUMERICAL
    except (DataError, ValueError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        code = EXIT_DATA
    if run is not None:
        run.manifest(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
