"""Evaluation protocol: inflow-noise robustness, parameter landscapes, FD data, smoothing."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CORE_PARAMS,
    DEFAULT_OPTIONS,
    PARAM_NAMES,
    BoundaryConditions,
    ModelOptions,
    NetworkGeometry,
    NumericalError,
    ParameterSchedule,
    Trajectory,
    equilibrium_speed,
    simulate,
)
from .objective import ObservedField, mape

PENALTY_MAPE = 100.0
DEFAULT_LANDSCAPE_GRID = tuple(np.round(np.linspace(-0.1, 0.1, 21), 12))


@dataclass(frozen=True)
class NoiseSpec:
    """Relative standard deviations applied to every upstream inflow value."""

    levels: tuple[float, ...]
    samples_per_level: int = 1000
    seed: int = 0

    def __post_init__(self):
        levels = tuple(float(x) for x in self.levels)
        object.__setattr__(self, "levels", levels)
        if any(x < 0 for x in levels) or list(levels) != sorted(levels):
            raise ValueError("noise levels must be nonnegative and sorted")
        if self.samples_per_level < 1:
            raise ValueError("samples_per_level must be at least 1")


def perturbed_inflow(inflow, sigma: float, seed: int, level_index: int, sample_index: int) -> np.ndarray:
    """Inflow with independent mean-zero Gaussian noise of std ``sigma * value``, clipped at 0.

    The draw depends only on ``(seed, level_index, sample_index)`` so any
    split of samples across workers reproduces the same noise.
    """
    rng = np.random.default_rng([seed, level_index, sample_index])
    inflow = np.asarray(inflow, dtype=float)
    return np.clip(inflow + sigma * inflow * rng.standard_normal(inflow.shape), 0.0, None)


@dataclass
class LevelStats:
    level: float
    mean: float
    worst: float
    best: float
    median: float
    p05: float
    p95: float
    std: float
    instability_incidents: int
    clamp_events: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RobustnessReport:
    levels: list[LevelStats]
    samples: np.ndarray  # (n_levels, n_samples) MAPE per draw
    unperturbed_mape: float
    seed: int

    @property
    def average(self) -> np.ndarray:
        return np.array([s.mean for s in self.levels])

    @property
    def worst(self) -> np.ndarray:
        return np.array([s.worst for s in self.levels])

    def as_dict(self) -> dict:
        return {"seed": self.seed, "unperturbed_mape": self.unperturbed_mape,
                "levels": [s.as_dict() for s in self.levels]}


def _score_run(schedule, observed, bc, geom, options, reference):
    try:
        traj = simulate(observed.initial_state, schedule, bc, geom, options, horizon=observed.horizon)
    except NumericalError:
        return PENALTY_MAPE, True, 0
    speed = traj.speed[1:]
    if not np.all(np.isfinite(speed)):
        return PENALTY_MAPE, True, traj.total_clamp_events
    return mape(speed, reference), False, traj.total_clamp_events


def _run_chunk(args):
    schedule, observed, bc, geom, options, reference, sigma, seed, li, sample_ids = args
    out = []
    for si in sample_ids:
        noisy = bc.with_upstream_flow(perturbed_inflow(bc.upstream_flow, sigma, seed, li, si))
        out.append(_score_run(schedule, observed, noisy, geom, options, reference))
    return out


def robustness_sweep(schedule: ParameterSchedule, observed: ObservedField, bc: BoundaryConditions,
                     geom: NetworkGeometry, noise: NoiseSpec, *, options: ModelOptions = DEFAULT_OPTIONS,
                     workers: int = 1, reference_speed=None) -> RobustnessReport:
    """Monte-Carlo MAPE under inflow noise, with downstream boundary and initial state fixed.

    ``reference_speed`` is the ``(H+1, S)`` grid scored against (default: the
    observed speed). Rollouts that blow up score :data:`PENALTY_MAPE` and are
    counted as instability incidents.
    """
    reference = np.asarray(observed.speed_obs if reference_speed is None else reference_speed, float)[1:]
    base, _, _ = _score_run(schedule, observed, bc, geom, options, reference)
    n = noise.samples_per_level
    tasks = []
    n_chunks = max(1, workers)
    for li, sigma in enumerate(noise.levels):
        for ids in np.array_split(np.arange(n), min(n_chunks, n)):
            tasks.append((li, (schedule, observed, bc, geom, options, reference, sigma, noise.seed, li, ids.tolist())))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, [t[1] for t in tasks]))
    else:
        results = [_run_chunk(t[1]) for t in tasks]
    per_level: dict[int, list] = {li: [] for li in range(len(noise.levels))}
    for (li, _), res in zip(tasks, results):
        per_level[li].extend(res)
    samples = np.array([[r[0] for r in per_level[li]] for li in range(len(noise.levels))]).reshape(len(noise.levels), n)
    stats = []
    for li, sigma in enumerate(noise.levels):
        vals = samples[li]
        stats.append(LevelStats(
            level=sigma, mean=float(vals.mean()), worst=float(vals.max()), best=float(vals.min()),
            median=float(np.median(vals)), p05=float(np.percentile(vals, 5)), p95=float(np.percentile(vals, 95)),
            std=float(vals.std()), instability_incidents=int(sum(r[1] for r in per_level[li])),
            clamp_events=int(sum(r[2] for r in per_level[li]))))
    return RobustnessReport(stats, samples, base, noise.seed)


@dataclass
class LandscapeReport:
    segment_index: int
    grid: np.ndarray
    baseline_mape: float
    delta_mape: dict[str, np.ndarray] = field(default_factory=dict)
    blowups: dict[str, int] = field(default_factory=dict)

    def max_abs_delta(self) -> dict[str, float]:
        return {k: float(np.max(np.abs(v))) for k, v in self.delta_mape.items()}

    def as_dict(self) -> dict:
        return {"segment_index": self.segment_index, "grid": self.grid.tolist(), "baseline_mape": self.baseline_mape,
                "delta_mape": {k: v.tolist() for k, v in self.delta_mape.items()}, "blowups": self.blowups}


def perturb_schedule(schedule: ParameterSchedule, segment_index: int, name: str, fraction: float) -> ParameterSchedule:
    """Scale one parameter on one segment by ``1 + fraction`` in every block."""
    if fraction == 0:
        return schedule
    blocks = schedule.blocks.copy()
    blocks[:, segment_index, PARAM_NAMES.index(name)] *= 1.0 + fraction
    return schedule.replace_blocks(blocks)


def landscape_sweep(schedule: ParameterSchedule, observed: ObservedField, bc: BoundaryConditions,
                    geom: NetworkGeometry, segment_index: int = 0, grid=DEFAULT_LANDSCAPE_GRID,
                    params=CORE_PARAMS, *, options: ModelOptions = DEFAULT_OPTIONS,
                    reference_speed=None) -> LandscapeReport:
    """Speed-MAPE change as each parameter on one segment is scaled over ``grid``."""
    if not 0 <= segment_index < geom.num_segments:
        raise ValueError(f"segment_index {segment_index} out of range")
    ramp_params = {"beta", "r_vph"} & set(params)
    has_ramp = segment_index in geom.onramp_segments or segment_index in geom.offramp_segments
    if has_ramp and not ramp_params:
        raise ValueError(f"segment {segment_index} has a ramp; choose a ramp-free segment or include ramp parameters")
    reference = np.asarray(observed.speed_obs if reference_speed is None else reference_speed, float)[1:]
    baseline, _, _ = _score_run(schedule, observed, bc, geom, options, reference)
    grid = np.asarray(grid, dtype=float)
    report = LandscapeReport(segment_index, grid, baseline)
    for name in params:
        deltas = np.empty(grid.size)
        n_blow = 0
        for i, f in enumerate(grid):
            value, blew, _ = _score_run(perturb_schedule(schedule, segment_index, name, float(f)),
                                        observed, bc, geom, options, reference)
            n_blow += blew
            deltas[i] = value - baseline
        report.delta_mape[name] = deltas
        report.blowups[name] = n_blow
    return report


@dataclass
class FdPoints:
    """Flow-density scatter plus the model's equilibrium flow curve.

    ``points`` rows are ``(t, segment, density, flow)``. ``curves`` maps
    ``(block, segment)`` to an ``(n, 2)`` array of ``(density, flow)`` samples.
    """

    points: np.ndarray
    curves: dict[tuple[int, int], np.ndarray]
    schedule: ParameterSchedule | None = None
    lanes: np.ndarray | None = None
    fd_form: str = "typeset"

    def curve_flow(self, rho, segment: int, block: int = 0):
        p = self.schedule.blocks[block, segment]
        return np.asarray(rho) * equilibrium_speed(rho, np.broadcast_to(p, np.shape(rho) + p.shape), self.fd_form) * self.lanes[segment]


def fd_points(trajectory: Trajectory, geom: NetworkGeometry, schedule: ParameterSchedule | None = None,
              n_curve: int = 101, rho_max: float | None = None, fd_form: str = "typeset") -> FdPoints:
    n_t, S = trajectory.density.shape
    if n_t == 0:
        return FdPoints(np.empty((0, 4)), {}, schedule, geom.lanes_array, fd_form)
    t_idx, s_idx = np.meshgrid(np.arange(n_t), np.arange(S), indexing="ij")
    points = np.column_stack([t_idx.ravel(), s_idx.ravel(), trajectory.density.ravel(), trajectory.flow.ravel()])
    curves = {}
    if schedule is not None:
        top = rho_max if rho_max is not None else max(float(trajectory.density.max()) * 1.2, 1.0)
        rho = np.linspace(0.0, top, n_curve)
        lanes = geom.lanes_array
        for b in range(schedule.n_blocks):
            for s in range(S):
                p = schedule.blocks[b, s]
                q = rho * equilibrium_speed(rho, np.broadcast_to(p, (n_curve, p.size)), fd_form) * lanes[s]
                curves[(b, s)] = np.column_stack([rho, q])
    return FdPoints(points, curves, schedule, geom.lanes_array, fd_form)


def _moving_average(x, window):
    h = window // 2
    n = x.size
    out = np.empty(n)
    for i in range(n):
        seg = x[max(0, i - h): min(n, i + h + 1)]
        # offset by the centre value so constant stretches stay exact
        out[i] = x[i] + np.mean(seg - x[i])
    return out


def smooth_boundaries(bc: BoundaryConditions, window: int = 5) -> BoundaryConditions:
    """Centred moving average of every boundary series; the window shrinks at the edges."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if window == 1:
        return BoundaryConditions(bc.upstream_flow.copy(), bc.upstream_speed.copy(), bc.downstream_density.copy())
    return BoundaryConditions(_moving_average(bc.upstream_flow, window), _moving_average(bc.upstream_speed, window),
                              _moving_average(bc.downstream_density, window))
