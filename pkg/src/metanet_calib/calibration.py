"""Static (time-invariant) calibration and the shared result type."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_OPTIONS,
    BoundaryConditions,
    ModelOptions,
    NetworkGeometry,
    NumericalError,
    ParameterSchedule,
    TrafficState,
    cfl_check,
    simulate,
)
from .objective import LossConfig, ObservedField, WindowObjective, mape
from .params import Bounds, ParameterVector, default_free_mask
from .solver import SolverConfig, SolverResult, minimize_box


@dataclass
class CalibrationResult:
    method: str
    theta_star: ParameterVector
    schedule: ParameterSchedule
    loss_trace: list[float]
    final_loss: float
    final_mape: float
    iterations: int
    wall_time_s: float
    termination_reason: str
    warm_start_used: ParameterVector
    n_evaluations: int = 0
    blowups: int = 0
    incidents: list[dict] = field(default_factory=list)
    windows: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "final_loss": self.final_loss,
            "final_mape": self.final_mape,
            "iterations": self.iterations,
            "wall_time_s": self.wall_time_s,
            "termination_reason": self.termination_reason,
            "n_blocks": self.schedule.n_blocks,
            "n_evaluations": self.n_evaluations,
            "blowups": self.blowups,
            "incidents": self.incidents,
        }


def _check_inputs(observed, bc, geom, bounds, warm):
    H = observed.horizon
    if len(bc) < H:
        raise ValueError(f"boundary conditions cover {len(bc)} steps, observations {H}")
    if observed.num_segments != geom.num_segments:
        raise ValueError("observed grid width does not match the geometry")
    ok, ratio = cfl_check(geom, bounds.v_free_max())
    if not ok:
        raise ValueError(f"CFL violated for v_free upper bound {bounds.v_free_max()} (ratio {ratio:.3f})")
    if not warm.in_bounds():
        raise ValueError("warm start lies outside the bounds")


def score_schedule(schedule: ParameterSchedule, observed: ObservedField, bc: BoundaryConditions,
                   geom: NetworkGeometry, loss: LossConfig | None = None,
                   options: ModelOptions = DEFAULT_OPTIONS) -> tuple[float, float]:
    """Full-horizon ``(loss, speed MAPE)`` of a schedule from the observed initial state."""
    template = ParameterVector.from_blocks(schedule.blocks, Bounds(schedule.blocks[0], schedule.blocks[0]),
                                           np.zeros(schedule.blocks.shape[1:], bool))
    obj = WindowObjective(observed, bc, geom, template, schedule.breakpoints,
                          loss=loss or LossConfig(), options=options)
    value = obj.value(np.zeros(0))
    try:
        traj = simulate(observed.initial_state, schedule, bc, geom, options, horizon=observed.horizon)
    except NumericalError:
        return value, float("inf")
    return value, mape(traj.speed[1:], observed.speed_obs[1:])


def solve_window(objective: WindowObjective, x0, cfg: SolverConfig) -> SolverResult:
    if cfg.gradient == "exact":
        fg = objective.value_and_grad
    else:
        def fg(x):
            return objective.value(x), objective.fd_gradient(x, mode=cfg.gradient)
    return minimize_box(fg, x0, 0.0, 1.0, cfg)


def calibrate_static(observed: ObservedField, bc: BoundaryConditions, geom: NetworkGeometry,
                     bounds: Bounds, warm_start, cfg: SolverConfig = SolverConfig(), *,
                     loss: LossConfig | None = None, options: ModelOptions = DEFAULT_OPTIONS,
                     free_mask=None) -> CalibrationResult:
    """Fit one per-segment parameter set over the whole horizon."""
    t_start = time.perf_counter()
    mask = default_free_mask(geom) if free_mask is None else free_mask
    warm = warm_start if isinstance(warm_start, ParameterVector) else ParameterVector.from_blocks(warm_start, bounds, mask)
    _check_inputs(observed, bc, geom, bounds, warm)
    obj = WindowObjective(observed, bc, geom, warm, (0,), 0, observed.horizon,
                          loss=loss or LossConfig(), options=options)
    res = solve_window(obj, warm.normalized(), cfg)
    theta = warm.with_normalized(res.x)
    schedule = theta.to_schedule()
    final_loss, final_mape = score_schedule(schedule, observed, bc, geom, loss, options)
    return CalibrationResult(
        method="static",
        theta_star=theta,
        schedule=schedule,
        loss_trace=res.trace,
        final_loss=final_loss,
        final_mape=final_mape,
        iterations=res.iterations,
        wall_time_s=time.perf_counter() - t_start,
        termination_reason=res.reason,
        warm_start_used=warm,
        n_evaluations=obj.n_evals,
        blowups=obj.n_blowups,
    )
