"""Synthetic twin scenarios: known parameter schedules driven by shaped boundaries."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np
from scipy.optimize import brentq

from .core import (
    DEFAULT_OPTIONS,
    PARAM_NAMES,
    BoundaryConditions,
    ModelOptions,
    NetworkGeometry,
    NumericalError,
    ParameterSchedule,
    TrafficState,
    equilibrium_speed,
    simulate,
)
from .objective import ObservedField
from .params import default_warm_start

INFLOW_SHAPES = ("constant", "ramp", "sinusoidal")


@dataclass(frozen=True)
class BoundaryProfile:
    """Shape of the synthetic boundary series.

    Inflow spans ``[inflow_low, inflow_high]`` veh/h. The downstream density
    oscillates around ``downstream_base`` with ``downstream_amplitude`` and
    ``downstream_period_steps``, which is what seeds backward-travelling waves.
    Upstream speed defaults to the free-flow equilibrium speed of the inflow
    on segment 0.
    """

    inflow_shape: str = "sinusoidal"
    inflow_low: float = 3000.0
    inflow_high: float = 5000.0
    inflow_period_steps: int = 180
    downstream_base: float = 30.0
    downstream_amplitude: float = 0.0
    downstream_period_steps: int = 60
    upstream_speed: float | None = None

    def __post_init__(self):
        if self.inflow_shape not in INFLOW_SHAPES:
            raise ValueError(f"inflow_shape must be one of {INFLOW_SHAPES}")

    def inflow(self, horizon: int) -> np.ndarray:
        t = np.arange(horizon, dtype=float)
        lo, hi = self.inflow_low, self.inflow_high
        if self.inflow_shape == "constant":
            return np.full(horizon, lo)
        if self.inflow_shape == "ramp":
            return lo + (hi - lo) * t / max(horizon - 1, 1)
        return lo + (hi - lo) * 0.5 * (1.0 - np.cos(2.0 * np.pi * t / self.inflow_period_steps))

    def downstream(self, horizon: int) -> np.ndarray:
        t = np.arange(horizon, dtype=float)
        return self.downstream_base + self.downstream_amplitude * np.sin(2.0 * np.pi * t / self.downstream_period_steps)


@dataclass
class ScenarioBundle:
    geometry: NetworkGeometry
    observed: ObservedField
    bc: BoundaryConditions
    truth: ParameterSchedule | None = None
    truth_speed: np.ndarray | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.observed.horizon


def free_flow_density(flow_vph: float, params_row, lanes: float, fd_form: str = "typeset") -> float:
    """Density on the uncongested branch carrying ``flow_vph`` in equilibrium."""
    def q(rho):
        return rho * equilibrium_speed(rho, params_row, fd_form) * lanes

    grid = np.linspace(0.0, 200.0, 2001)
    flows = grid * equilibrium_speed(grid, np.broadcast_to(params_row, (grid.size, len(PARAM_NAMES))), fd_form) * lanes
    i_cap = int(np.argmax(flows))
    if flow_vph >= flows[i_cap]:
        return float(grid[i_cap])
    if flow_vph <= 0:
        return 0.0
    return float(brentq(lambda r: q(r) - flow_vph, 0.0, grid[i_cap]))


def equilibrium_initial_state(flow_vph: float, params, geom: NetworkGeometry, fd_form: str = "typeset") -> TrafficState:
    lanes = geom.lanes_array
    rho = np.array([free_flow_density(flow_vph, params[i], lanes[i], fd_form) for i in range(geom.num_segments)])
    return TrafficState.from_density_speed(rho, equilibrium_speed(rho, params, fd_form), geom)


def shifted_schedule(base, horizon: int, shifts: list[tuple[int, Mapping[str, float]]] = ()) -> ParameterSchedule:
    """Schedule starting from ``base`` with absolute parameter values set at given steps.

    Each shift is ``(step, {name: value})`` and applies to every segment.
    """
    base = np.asarray(base, dtype=float)
    breakpoints = [0]
    blocks = [base.copy()]
    for t, changes in sorted(shifts, key=lambda s: s[0]):
        if not 0 < t < horizon:
            raise ValueError(f"shift at step {t} outside (0, {horizon})")
        blk = blocks[-1].copy()
        for name, value in changes.items():
            blk[:, PARAM_NAMES.index(name)] = value
        breakpoints.append(int(t))
        blocks.append(blk)
    return ParameterSchedule(tuple(breakpoints), np.array(blocks))


def generate_synthetic(geom: NetworkGeometry, truth_schedule: ParameterSchedule, bc_profile: BoundaryProfile,
                       horizon: int, seed: int = 0, obs_noise: float = 0.0,
                       options: ModelOptions = DEFAULT_OPTIONS, name: str = "synthetic",
                       v_free_max: float = 140.0) -> ScenarioBundle:
    """Simulate the truth and package it as an observed scenario.

    ``obs_noise`` is the relative standard deviation of multiplicative,
    mean-zero Gaussian noise on the emitted speed field (density and flow are
    emitted noise-free). The observed initial state takes the noisy speed row.
    A truth rollout that goes non-finite or would need clamping raises
    ``ValueError``.
    """
    if not truth_schedule.covers(horizon):
        raise ValueError("truth schedule does not cover the horizon")
    rng = np.random.default_rng(seed)
    p0 = truth_schedule.blocks[0]
    inflow = bc_profile.inflow(horizon)
    down = bc_profile.downstream(horizon)
    if bc_profile.upstream_speed is None:
        rho_up = [free_flow_density(q, p0[0], geom.lanes[0], options.fd_form) for q in inflow]
        up_speed = equilibrium_speed(np.array(rho_up), np.broadcast_to(p0[0], (horizon, len(PARAM_NAMES))),
                                     options.fd_form) if horizon else np.zeros(0)
    else:
        up_speed = np.full(horizon, float(bc_profile.upstream_speed))
    bc = BoundaryConditions(inflow, up_speed, down)
    init_flow = float(inflow[0]) if horizon else bc_profile.inflow_low
    initial = equilibrium_initial_state(init_flow, p0, geom, options.fd_form)
    try:
        # the truth must never need clamping, so run it strictly
        traj = simulate(initial, truth_schedule, bc, geom, replace(options, strict=True))
    except NumericalError as err:
        raise ValueError(f"truth simulation is unstable: {err}") from err
    speed = traj.speed
    if obs_noise > 0:
        speed = np.clip(speed * (1.0 + obs_noise * rng.standard_normal(speed.shape)), 0.0, None)
    obs_initial = TrafficState.from_density_speed(traj.density[0], speed[0], geom)
    observed = ObservedField(speed, obs_initial, traj.density.copy(), traj.flow.copy())
    meta = {
        "name": name,
        "time_step_s": geom.time_step_s,
        "segment_length_km": geom.segment_length_km,
        "horizon": horizon,
        "seed": seed,
        "obs_noise": obs_noise,
        "v_free_max": v_free_max,
        "provenance": "synthetic",
        "fd_form": options.fd_form,
        "truth_clamp_events": traj.total_clamp_events,
    }
    return ScenarioBundle(geom, observed, bc, truth_schedule, traj.speed.copy(), meta)


# ---------------------------------------------------------------------------
# presets


def _geom(n, lanes=3, on=(), off=()):
    return NetworkGeometry(n, 0.4, 10.0, (lanes,) * n, frozenset(on), frozenset(off))


def build_scenario(layout: Mapping[str, Any], name: str = "synthetic", seed: int = 0,
                   obs_noise: float | None = None) -> ScenarioBundle:
    """Scenario from a layout mapping with keys ``geometry``, ``horizon``, ``profile``
    and optionally ``base``, ``shifts`` and ``obs_noise`` (the layout of :data:`PRESETS`)."""
    geom = _geom(**layout["geometry"])
    H = int(layout["horizon"])
    base = default_warm_start(geom, layout.get("base"))
    truth = shifted_schedule(base, H, [(int(t), c) for t, c in layout.get("shifts", [])])
    noise = layout.get("obs_noise", 0.0) if obs_noise is None else obs_noise
    return generate_synthetic(geom, truth, BoundaryProfile(**layout.get("profile", {})), H, seed=seed,
                              obs_noise=noise, name=name)


def preset(name: str, seed: int = 0, obs_noise: float | None = None) -> ScenarioBundle:
    """Build a named synthetic scenario (see :data:`PRESETS`)."""
    try:
        layout = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return build_scenario(layout, name, seed, obs_noise)


# truth base for the twins, deliberately away from the default warm start
TWIN_BASE = {"tau_h": 20.0 / 3600.0, "eta": 50.0, "kappa": 30.0, "a": 2.0, "v_free_kmh": 110.0, "rho_cr": 32.0}

PRESETS: dict[str, dict] = {
    "small": {
        "geometry": {"n": 4, "on": (2,), "off": (1,)},
        "horizon": 90,
        "base": TWIN_BASE,
        "profile": {"inflow_low": 3000.0, "inflow_high": 4500.0, "inflow_period_steps": 90,
                    "downstream_base": 40.0, "downstream_amplitude": 15.0, "downstream_period_steps": 45},
    },
    "static-twin": {
        "geometry": {"n": 8},
        "horizon": 180,
        "base": TWIN_BASE,
        "profile": {"inflow_low": 3000.0, "inflow_high": 5500.0, "inflow_period_steps": 180,
                    "downstream_base": 40.0, "downstream_amplitude": 20.0, "downstream_period_steps": 60},
    },
    "shift-twin": {
        "geometry": {"n": 8},
        "horizon": 360,
        "profile": {"inflow_low": 3000.0, "inflow_high": 5500.0, "inflow_period_steps": 360,
                    "downstream_base": 40.0, "downstream_amplitude": 20.0, "downstream_period_steps": 60},
        "base": TWIN_BASE,
        "shifts": [(180, {"v_free_kmh": 85.0, "rho_cr": 38.0})],
        "obs_noise": 0.03,
    },
}
