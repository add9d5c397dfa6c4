"""Dynamic calibration by rolling-horizon optimisation.

Each subproblem fits one per-segment parameter block over the prediction
window ``[t, t + H_p]`` starting from the current model state, plus a penalty
on the normalised jump from the previous block. The block is then executed for
``H_c`` steps and the resulting state seeds the next subproblem.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationResult, _check_inputs, score_schedule, solve_window
from .core import (
    DEFAULT_OPTIONS,
    BoundaryConditions,
    ModelOptions,
    NetworkGeometry,
    NumericalError,
    ParameterSchedule,
    simulate,
)
from .objective import BLOWUP_PENALTY, LossConfig, ObservedField, WindowObjective
from .params import Bounds, ParameterVector, default_free_mask
from .solver import SolverConfig

# control / prediction horizons in minutes
DEFAULT_HORIZONS_MIN = ((1, 2), (2, 4), (5, 10), (10, 15), (15, 20), (20, 25), (30, 40))


def minutes_to_steps(minutes: float, time_step_s: float) -> int:
    steps = minutes * 60.0 / time_step_s
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError(f"{minutes} min is not a whole number of {time_step_s} s steps")
    return int(round(steps))


def default_horizon_steps(time_step_s: float = 10.0) -> list[tuple[int, int]]:
    return [(minutes_to_steps(c, time_step_s), minutes_to_steps(p, time_step_s)) for c, p in DEFAULT_HORIZONS_MIN]


@dataclass(frozen=True)
class RhoConfig:
    """Rolling-horizon settings.

    ``nominal_anchor`` is ``(theta_nominal, epsilon)`` with ``theta_nominal``
    an ``(S, 8)`` array; each block is pulled back into the normalised
    epsilon-ball around it. ``jump_cap`` bounds the normalised change between
    consecutive blocks. Both are applied after the subproblem is solved.
    """

    control_horizon_steps: int
    prediction_horizon_steps: int
    jump_penalty_weight: float = 1.0
    nominal_anchor: tuple[np.ndarray, float] | None = None
    jump_cap: float | None = None
    reanchor: bool = False
    inner_solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.control_horizon_steps < 1:
            raise ValueError("control horizon must be at least one step")
        if not self.control_horizon_steps < self.prediction_horizon_steps:
            raise ValueError("control horizon must be shorter than the prediction horizon")
        if self.jump_penalty_weight < 0:
            raise ValueError("jump_penalty_weight must be nonnegative")


def _clip_ball(x, centre, radius):
    d = x - centre
    n = float(np.linalg.norm(d))
    if n <= radius or n == 0:
        return x
    return centre + d * (radius / n)


def calibrate_rho(observed: ObservedField, bc: BoundaryConditions, geom: NetworkGeometry, bounds: Bounds,
                  warm_start, cfg: RhoConfig, *, loss: LossConfig | None = None,
                  options: ModelOptions = DEFAULT_OPTIONS, free_mask=None) -> CalibrationResult:
    """Produce a piecewise-constant schedule with one block per control interval."""
    t_start = time.perf_counter()
    mask = default_free_mask(geom) if free_mask is None else free_mask
    warm = warm_start if isinstance(warm_start, ParameterVector) else ParameterVector.from_blocks(warm_start, bounds, mask)
    _check_inputs(observed, bc, geom, bounds, warm)
    loss = loss or LossConfig()
    H = observed.horizon
    Hc, Hp = cfg.control_horizon_steps, cfg.prediction_horizon_steps

    nominal = None
    if cfg.nominal_anchor is not None:
        nominal = ParameterVector.from_blocks(cfg.nominal_anchor[0], bounds, warm.mask).normalized()

    state = observed.initial_state
    prev = warm
    blocks, breakpoints, windows, incidents, trace = [], [], [], [], []
    iterations = n_evals = blowups = 0
    for k, t in enumerate(range(0, H, Hc)):
        t_pred = min(t + Hp, H)
        t_exec = min(t + Hc, H)
        prev_norm = prev.normalized()
        obj = WindowObjective(observed, bc, geom, prev, (0,), t, t_pred, state, loss, options,
                              anchor=prev_norm, jump_weight=cfg.jump_penalty_weight)
        res = solve_window(obj, prev_norm, cfg.inner_solver)
        iterations += res.iterations
        n_evals += obj.n_evals
        blowups += obj.n_blowups
        xk = res.x
        if nominal is not None:
            xk = np.clip(_clip_ball(xk, nominal, cfg.nominal_anchor[1]), 0.0, 1.0)
        if cfg.jump_cap is not None:
            xk = np.clip(_clip_ball(xk, prev_norm, cfg.jump_cap), 0.0, 1.0)
        theta_k = prev.with_normalized(xk)

        failed = res.fun >= BLOWUP_PENALTY
        try:
            traj = None if failed else simulate(state, theta_k.blocks[0], bc.window(t, t_exec), geom, options, start=t)
        except NumericalError:
            failed = True
        if failed:
            incidents.append({"window": k, "t": t, "reason": "subproblem failed; previous block retained"})
            theta_k = prev
            traj = simulate(state, theta_k.blocks[0], bc.window(t, t_exec), geom, options, start=t)

        windows.append({"window": k, "t0": t, "t_pred": t_pred, "t_exec": t_exec, "iterations": res.iterations,
                        "termination_reason": res.reason, "loss_start": res.trace[0], "loss_end": res.trace[-1]})
        trace.append(res.trace[-1])
        blocks.append(theta_k.blocks[0])
        breakpoints.append(t)
        state = observed.state_at(t_exec, geom) if cfg.reanchor and t_exec < H else traj.state(traj.horizon)
        prev = theta_k

    schedule = ParameterSchedule(tuple(breakpoints), np.array(blocks))
    theta_star = ParameterVector.from_blocks(schedule.blocks, bounds, warm.mask)
    final_loss, final_mape = score_schedule(schedule, observed, bc, geom, loss, options)
    return CalibrationResult(
        method="rho",
        theta_star=theta_star,
        schedule=schedule,
        loss_trace=trace,
        final_loss=final_loss,
        final_mape=final_mape,
        iterations=iterations,
        wall_time_s=time.perf_counter() - t_start,
        termination_reason="completed" if not incidents else "completed-with-incidents",
        warm_start_used=warm,
        n_evaluations=n_evals,
        blowups=blowups,
        incidents=incidents,
        windows=windows,
    )


def expected_windows(horizon: int, control_steps: int) -> int:
    return math.ceil(horizon / control_steps)


@dataclass
class HorizonRow:
    control_steps: int
    prediction_steps: int
    result: CalibrationResult | None = None
    error: str | None = None
    robustness: object | None = None

    def as_dict(self) -> dict:
        row = {"control_steps": self.control_steps, "prediction_steps": self.prediction_steps, "error": self.error}
        if self.result is not None:
            row.update(final_loss=self.result.final_loss, final_mape=self.result.final_mape,
                       n_blocks=self.result.schedule.n_blocks, wall_time_s=self.result.wall_time_s,
                       incidents=len(self.result.incidents))
        if self.robustness is not None:
            row["robustness"] = self.robustness.as_dict()
        return row


def horizon_sweep(observed: ObservedField, bc: BoundaryConditions, geom: NetworkGeometry, bounds: Bounds,
                  warm_start, horizon_list, inner: SolverConfig = SolverConfig(), *,
                  jump_penalty_weight: float = 1.0, loss: LossConfig | None = None,
                  options: ModelOptions = DEFAULT_OPTIONS, free_mask=None, noise=None, workers: int = 1,
                  reference_speed=None) -> list[HorizonRow]:
    """Run :func:`calibrate_rho` for each ``(H_c, H_p)`` pair.

    With ``noise`` (a ``NoiseSpec``) every calibrated schedule is also put
    through the inflow-noise robustness sweep, scored against
    ``reference_speed`` when given and the observed speed otherwise.
    """
    rows = []
    for hc, hp in horizon_list:
        row = HorizonRow(int(hc), int(hp))
        try:
            cfg = RhoConfig(int(hc), int(hp), jump_penalty_weight=jump_penalty_weight, inner_solver=inner)
            row.result = calibrate_rho(observed, bc, geom, bounds, warm_start, cfg, loss=loss,
                                       options=options, free_mask=free_mask)
            if noise is not None:
                from .evaluation import robustness_sweep

                row.robustness = robustness_sweep(row.result.schedule, observed, bc, geom, noise,
                                                  options=options, workers=workers,
                                                  reference_speed=reference_speed)
        except (ValueError, NumericalError) as err:
            row.error = f"{type(err).__name__}: {err}"
        rows.append(row)
    return rows
