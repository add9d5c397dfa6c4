"""Text file formats for scenarios, schedules, results, reports and run manifests.

A scenario is a directory holding ``scenario.yaml`` (geometry, metadata and
file names) next to comma-separated grids. Grids have a header row of segment
indices and one row per time step; the boundary file has columns
``t_index, upstream_flow_vph, upstream_speed_kmh, downstream_density_vpkpl``.
Floats are written with ``repr`` so every round trip is lossless.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .calibration import CalibrationResult
from .core import PARAM_NAMES, BoundaryConditions, NetworkGeometry, ParameterSchedule, TrafficState, cfl_check
from .evaluation import LandscapeReport, LevelStats, RobustnessReport
from .objective import ObservedField
from .params import ParameterVector
from .synthetic import ScenarioBundle

BOUNDARY_COLUMNS = ("t_index", "upstream_flow_vph", "upstream_speed_kmh", "downstream_density_vpkpl")
SCHEDULE_COLUMNS = ("block", "start_step", "segment") + PARAM_NAMES
DEFAULT_V_FREE_MAX = 140.0
# run-dependent files kept out of output digests so reruns compare bitwise
UNDIGESTED = ("manifest.json", "timing.json")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _fmt(x) -> str:
    return repr(float(x))


def _parse_float(text, path, line):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"{path}:{line}: non-finite value {text!r}")
    return value


# ---------------------------------------------------------------------------
# grids


def write_grid(path, grid) -> Path:
    path = Path(path)
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(range(grid.shape[1]))
        for row in grid:
            w.writerow([_fmt(x) for x in row])
    return path


def read_grid(path, n_rows: int | None = None, n_cols: int | None = None) -> np.ndarray:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty grid file")
    header = rows[0]
    try:
        cols = [int(c) for c in header]
    except ValueError:
        raise DataError(f"{path}:1: header must list segment indices, got {header}") from None
    if cols != list(range(len(cols))):
        raise DataError(f"{path}:1: header must be 0..S-1, got {header}")
    if n_cols is not None and len(cols) != n_cols:
        raise DataError(f"{path}: {len(cols)} columns, expected {n_cols} segments")
    data = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(cols):
            raise DataError(f"{path}:{i}: {len(row)} fields, expected {len(cols)}")
        data.append([_parse_float(x, path, i) for x in row])
    if n_rows is not None and len(data) != n_rows:
        raise DataError(f"{path}: {len(data)} data rows, expected {n_rows} (horizon + 1)")
    return np.array(data, dtype=float).reshape(len(data), len(cols))


def write_boundary(path, bc: BoundaryConditions) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOUNDARY_COLUMNS)
        for t in range(len(bc)):
            w.writerow([t, _fmt(bc.upstream_flow[t]), _fmt(bc.upstream_speed[t]), _fmt(bc.downstream_density[t])])
    return path


def read_boundary(path, horizon: int | None = None) -> BoundaryConditions:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != BOUNDARY_COLUMNS:
        raise DataError(f"{path}:1: header must be {','.join(BOUNDARY_COLUMNS)}")
    cols = [[], [], []]
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise DataError(f"{path}:{i}: expected 4 fields, got {len(row)}")
        if int(_parse_float(row[0], path, i)) != i - 2:
            raise DataError(f"{path}:{i}: t_index {row[0]} out of sequence")
        for c in range(3):
            value = _parse_float(row[c + 1], path, i)
            if value < 0:
                raise DataError(f"{path}:{i}: negative boundary value {value}")
            cols[c].append(value)
    if horizon is not None and len(cols[0]) != horizon:
        raise DataError(f"{path}: {len(cols[0])} time steps, expected {horizon}")
    return BoundaryConditions(*(np.array(c) for c in cols))


def write_schedule(path, schedule: ParameterSchedule) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCHEDULE_COLUMNS)
        for b, start in enumerate(schedule.breakpoints):
            for s in range(schedule.blocks.shape[1]):
                w.writerow([b, start, s] + [_fmt(x) for x in schedule.blocks[b, s]])
    return path


def read_schedule(path, n_segments: int | None = None) -> ParameterSchedule:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != SCHEDULE_COLUMNS:
        raise DataError(f"{path}:1: header must be {','.join(SCHEDULE_COLUMNS)}")
    entries: dict[int, tuple[int, dict[int, list[float]]]] = {}
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(SCHEDULE_COLUMNS):
            raise DataError(f"{path}:{i}: expected {len(SCHEDULE_COLUMNS)} fields")
        b, start, s = (int(_parse_float(x, path, i)) for x in row[:3])
        start0, segs = entries.setdefault(b, (start, {}))
        if start0 != start:
            raise DataError(f"{path}:{i}: block {b} has inconsistent start_step")
        segs[s] = [_parse_float(x, path, i) for x in row[3:]]
    if sorted(entries) != list(range(len(entries))):
        raise DataError(f"{path}: block indices must be 0..n-1")
    S = n_segments if n_segments is not None else len(entries[0][1])
    blocks = []
    for b in range(len(entries)):
        segs = entries[b][1]
        if sorted(segs) != list(range(S)):
            raise DataError(f"{path}: block {b} must list segments 0..{S - 1}")
        blocks.append([segs[s] for s in range(S)])
    try:
        return ParameterSchedule(tuple(entries[b][0] for b in range(len(entries))), np.array(blocks))
    except ValueError as err:
        raise DataError(f"{path}: {err}") from None


def write_initial_state(path, state: TrafficState) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("segment", "density_vpkpl", "speed_kmh"))
        for s in range(len(state.density)):
            w.writerow([s, _fmt(state.density[s]), _fmt(state.speed[s])])
    return path


def read_initial_state(path, geom: NetworkGeometry) -> TrafficState:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != ("segment", "density_vpkpl", "speed_kmh"):
        raise DataError(f"{path}:1: header must be segment,density_vpkpl,speed_kmh")
    if len(rows) - 1 != geom.num_segments:
        raise DataError(f"{path}: {len(rows) - 1} segments, expected {geom.num_segments}")
    rho, v = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise DataError(f"{path}:{i}: expected 3 fields")
        rho.append(_parse_float(row[1], path, i))
        v.append(_parse_float(row[2], path, i))
    state = TrafficState.from_density_speed(rho, v, geom)
    try:
        state.validate()
    except ValueError as err:
        raise DataError(f"{path}: {err}") from None
    return state


# ---------------------------------------------------------------------------
# scenarios


def geometry_to_dict(geom: NetworkGeometry) -> dict:
    return {"num_segments": geom.num_segments, "segment_length_km": geom.segment_length_km,
            "time_step_s": geom.time_step_s, "lanes": list(geom.lanes),
            "onramp_segments": sorted(geom.onramp_segments), "offramp_segments": sorted(geom.offramp_segments)}


def geometry_from_dict(d: dict) -> NetworkGeometry:
    try:
        return NetworkGeometry(int(d["num_segments"]), float(d["segment_length_km"]), float(d["time_step_s"]),
                               tuple(d["lanes"]), frozenset(d.get("onramp_segments", ())),
                               frozenset(d.get("offramp_segments", ())))
    except (KeyError, TypeError, ValueError) as err:
        raise DataError(f"invalid geometry: {err}") from None


EXAMPLE_GEOMETRY = Path(__file__).parent / "data" / "i24_geometry.yaml"


def load_geometry(path=EXAMPLE_GEOMETRY) -> NetworkGeometry:
    """Geometry from a key-value file (defaults to the shipped I-24 example)."""
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as err:
        raise DataError(f"{path}: {err}") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}: geometry must be a mapping")
    return geometry_from_dict(doc)


def _to_plain(obj):
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_scenario(bundle: ScenarioBundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {"speed_obs": "speed_obs.csv", "boundary": "boundary.csv", "initial_state": "initial_state.csv"}
    write_grid(d / files["speed_obs"], bundle.observed.speed_obs)
    write_boundary(d / files["boundary"], bundle.bc)
    write_initial_state(d / files["initial_state"], bundle.observed.initial_state)
    if bundle.observed.density_obs is not None:
        files["density_obs"] = "density_obs.csv"
        write_grid(d / files["density_obs"], bundle.observed.density_obs)
    if bundle.observed.flow_obs is not None:
        files["flow_obs"] = "flow_obs.csv"
        write_grid(d / files["flow_obs"], bundle.observed.flow_obs)
    if bundle.truth is not None:
        files["truth_schedule"] = "truth_schedule.csv"
        write_schedule(d / files["truth_schedule"], bundle.truth)
    if bundle.truth_speed is not None:
        files["truth_speed"] = "truth_speed.csv"
        write_grid(d / files["truth_speed"], bundle.truth_speed)
    doc = {"name": bundle.metadata.get("name", d.name), "horizon": bundle.horizon,
           "geometry": geometry_to_dict(bundle.geometry), "metadata": _to_plain(bundle.metadata), "files": files}
    with (d / "scenario.yaml").open("w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    return d


def load_scenario(path) -> ScenarioBundle:
    """Load and validate a scenario directory (or its ``scenario.yaml``)."""
    p = Path(path)
    cfg_path = p / "scenario.yaml" if p.is_dir() else p
    d = cfg_path.parent
    if not cfg_path.exists():
        raise DataError(f"{cfg_path}: scenario file not found")
    try:
        doc = yaml.safe_load(cfg_path.read_text())
    except yaml.YAMLError as err:
        raise DataError(f"{cfg_path}: {err}") from None
    if not isinstance(doc, dict) or "geometry" not in doc or "files" not in doc:
        raise DataError(f"{cfg_path}: needs 'geometry' and 'files' sections")
    geom = geometry_from_dict(doc["geometry"])
    files = doc["files"]
    meta = dict(doc.get("metadata") or {})
    for name in ("speed_obs", "boundary", "initial_state"):
        if name not in files:
            raise DataError(f"{cfg_path}: files.{name} is required")

    speed = read_grid(d / files["speed_obs"], n_cols=geom.num_segments)
    H = int(doc.get("horizon", speed.shape[0] - 1))
    if speed.shape[0] != H + 1:
        raise DataError(f"{d / files['speed_obs']}: {speed.shape[0]} data rows, expected {H + 1} (horizon + 1)")
    grids = {}
    for name in ("density_obs", "flow_obs", "truth_speed"):
        if name in files:
            grids[name] = read_grid(d / files[name], n_rows=H + 1, n_cols=geom.num_segments)
    for name, grid in [("speed_obs", speed)] + list(grids.items()):
        if np.any(grid < 0):
            raise DataError(f"{d / files[name]}: negative entries")
    bc = read_boundary(d / files["boundary"], horizon=H)
    initial = read_initial_state(d / files["initial_state"], geom)
    truth = read_schedule(d / files["truth_schedule"], geom.num_segments) if "truth_schedule" in files else None

    v_max = float(meta.get("v_free_max", DEFAULT_V_FREE_MAX))
    ok, ratio = cfl_check(geom, v_max)
    if not ok:
        raise DataError(f"{cfg_path}: CFL violated, L/delta = {geom.segment_length_km / geom.dt_h:.1f} km/h "
                        f"< v_free_max {v_max}")
    observed = ObservedField(speed, initial, grids.get("density_obs"), grids.get("flow_obs"))
    meta.setdefault("name", doc.get("name", d.name))
    return ScenarioBundle(geom, observed, bc, truth, grids.get("truth_speed"), meta)


# ---------------------------------------------------------------------------
# results and reports


def _vector_to_dict(v: ParameterVector) -> dict:
    return {"blocks": v.blocks.tolist(), "mask": v.mask.tolist(), "lower": v.lower.tolist(), "upper": v.upper.tolist()}


def _vector_from_dict(d: dict) -> ParameterVector:
    return ParameterVector(np.array(d["blocks"], float), np.array(d["mask"], bool),
                           np.array(d["lower"], float), np.array(d["upper"], float))


def _json_float(x):
    return x if math.isfinite(x) else str(x)


def _float(x):
    return float(x)


def save_result(result: CalibrationResult, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    doc = {
        "method": result.method, "final_loss": _json_float(result.final_loss),
        "final_mape": _json_float(result.final_mape), "iterations": result.iterations,
        "termination_reason": result.termination_reason,
        "n_evaluations": result.n_evaluations, "blowups": result.blowups,
        "loss_trace": [_json_float(x) for x in result.loss_trace],
        "incidents": _to_plain(result.incidents), "windows": _to_plain(result.windows),
        "breakpoints": list(result.schedule.breakpoints),
        "theta_star": _vector_to_dict(result.theta_star), "warm_start_used": _vector_to_dict(result.warm_start_used),
    }
    out = {"result": d / "result.json", "schedule": d / "schedule.csv"}
    out["result"].write_text(json.dumps(doc, indent=1))
    write_schedule(out["schedule"], result.schedule)
    (d / "timing.json").write_text(json.dumps({"wall_time_s": result.wall_time_s}))
    return out


def load_result(directory) -> CalibrationResult:
    d = Path(directory)
    doc = json.loads((d / "result.json").read_text())
    schedule = read_schedule(d / "schedule.csv")
    timing = json.loads((d / "timing.json").read_text()) if (d / "timing.json").exists() else {}
    return CalibrationResult(
        method=doc["method"], theta_star=_vector_from_dict(doc["theta_star"]), schedule=schedule,
        loss_trace=[_float(x) for x in doc["loss_trace"]], final_loss=_float(doc["final_loss"]),
        final_mape=_float(doc["final_mape"]), iterations=doc["iterations"], wall_time_s=timing.get("wall_time_s", 0.0),
        termination_reason=doc["termination_reason"], warm_start_used=_vector_from_dict(doc["warm_start_used"]),
        n_evaluations=doc["n_evaluations"], blowups=doc["blowups"], incidents=doc["incidents"],
        windows=doc["windows"])


def save_robustness(report: RobustnessReport, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    doc = report.as_dict()
    doc["samples"] = report.samples.tolist()
    out = {"report": d / "robustness.json", "table": d / "robustness.csv"}
    out["report"].write_text(json.dumps(doc, indent=1))
    with out["table"].open("w", newline="") as fh:
        w = csv.writer(fh)
        cols = list(LevelStats.__dataclass_fields__)
        w.writerow(cols)
        for s in report.levels:
            w.writerow([getattr(s, c) if isinstance(getattr(s, c), int) else _fmt(getattr(s, c)) for c in cols])
    return out


def load_robustness(path) -> RobustnessReport:
    p = Path(path)
    doc = json.loads((p / "robustness.json" if p.is_dir() else p).read_text())
    levels = [LevelStats(**s) for s in doc["levels"]]
    return RobustnessReport(levels, np.array(doc["samples"], float).reshape(len(levels), -1),
                            doc["unperturbed_mape"], doc["seed"])


def save_landscape(report: LandscapeReport, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = {"report": d / "landscape.json", "table": d / "landscape.csv"}
    out["report"].write_text(json.dumps(report.as_dict(), indent=1))
    names = list(report.delta_mape)
    with out["table"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["perturbation"] + [f"delta_mape_{n}" for n in names])
        for i, f in enumerate(report.grid):
            w.writerow([_fmt(f)] + [_fmt(report.delta_mape[n][i]) for n in names])
    return out


def load_landscape(path) -> LandscapeReport:
    p = Path(path)
    doc = json.loads((p / "landscape.json" if p.is_dir() else p).read_text())
    return LandscapeReport(doc["segment_index"], np.array(doc["grid"], float), doc["baseline_mape"],
                           {k: np.array(v, float) for k, v in doc["delta_mape"].items()}, doc["blowups"])


def write_table(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])
    return path


# ---------------------------------------------------------------------------
# manifests


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_tree(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if not p.exists():
            continue
        files = sorted(x for x in p.rglob("*") if x.is_file() and x.name not in UNDIGESTED) if p.is_dir() else [p]
        for f in files:
            out[str(f.resolve())] = file_digest(f)
    return out


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict[str, Any]
    seeds: dict[str, int]
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)
    started_at: str = ""
    wall_clock_s: float = 0.0
    exit_code: int = 0
    environment: dict[str, str] = field(default_factory=dict)

    @classmethod
    def start(cls, command, argv, config, seeds, input_paths) -> "RunManifest":
        from . import __version__

        env = {"package": __version__, "python": platform.python_version(), "numpy": np.__version__}
        return cls(command, list(argv), _to_plain(config), dict(seeds), digest_tree(input_paths),
                   started_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"), environment=env)

    def finish(self, output_paths, wall_clock_s: float, exit_code: int = 0) -> "RunManifest":
        self.outputs = digest_tree(output_paths)
        self.wall_clock_s = wall_clock_s
        self.exit_code = exit_code
        return self

    def save(self, directory) -> Path:
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        p = Path(path)
        return cls(**json.loads((p / "manifest.json" if p.is_dir() else p).read_text()))


def chain_intact(manifests: list[RunManifest]) -> bool:
    """True when each run after the first consumed an earlier run's output, unchanged."""
    produced: dict[str, str] = {}
    for i, m in enumerate(manifests):
        linked = False
        for path, digest in m.inputs.items():
            if path in produced:
                if produced[path] != digest:
                    return False
                linked = True
        if i and not linked:
            return False
        produced.update(m.outputs)
    return all(m.exit_code == 0 for m in manifests)
