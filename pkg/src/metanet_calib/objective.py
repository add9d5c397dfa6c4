"""Calibration objective: squared-error loss, MAPE and loss gradients.

The loss scores the simulated states ``x_{t0+1} .. x_{t1}`` of a window
against the observed grids; the window's first state is the simulation start
and is not scored. Rollouts that blow up yield a large finite penalty so that
a line search can back away from them.
"""

from __future__ import annotations

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
    _advance,
    simulate,
    step_vjp,
)
from .params import ParameterVector

BLOWUP_PENALTY = 1e12
MAPE_FLOOR_KMH = 1.0


@dataclass(frozen=True)
class ObservedField:
    """Observed grids, each ``(H+1, S)`` with row 0 at the initial time."""

    speed_obs: np.ndarray
    initial_state: TrafficState
    density_obs: np.ndarray | None = None
    flow_obs: np.ndarray | None = None

    def __post_init__(self):
        speed = np.asarray(self.speed_obs, dtype=float)
        object.__setattr__(self, "speed_obs", speed)
        if speed.ndim != 2:
            raise ValueError("speed_obs must be a time x segment grid")
        for name in ("density_obs", "flow_obs"):
            grid = getattr(self, name)
            if grid is not None:
                grid = np.asarray(grid, dtype=float)
                if grid.shape != speed.shape:
                    raise ValueError(f"{name} has shape {grid.shape}, speed_obs has {speed.shape}")
                object.__setattr__(self, name, grid)
        for name in ("speed_obs", "density_obs", "flow_obs"):
            grid = getattr(self, name)
            if grid is not None and (not np.all(np.isfinite(grid)) or np.any(grid < 0)):
                raise ValueError(f"{name} must contain finite nonnegative values")
        if np.shape(self.initial_state.speed) != (speed.shape[1],):
            raise ValueError("initial_state does not match the grid width")

    @property
    def horizon(self) -> int:
        return self.speed_obs.shape[0] - 1

    @property
    def num_segments(self) -> int:
        return self.speed_obs.shape[1]

    def state_at(self, t: int, geom: NetworkGeometry) -> TrafficState:
        if t == 0:
            return self.initial_state
        if self.density_obs is None:
            raise ValueError("re-anchoring at t > 0 needs an observed density grid")
        return TrafficState.from_density_speed(self.density_obs[t], self.speed_obs[t], geom)


@dataclass(frozen=True)
class LossConfig:
    speed_weight: float = 1.0
    density_weight: float = 0.0
    flow_weight: float = 0.0


def mape(sim_speed, obs_speed, floor: float = MAPE_FLOOR_KMH, return_excluded: bool = False):
    """Mean absolute percentage error in percent.

    Observed entries below ``floor`` are excluded; with ``return_excluded``
    the number of excluded cells is returned alongside the value.
    """
    sim = np.asarray(sim_speed, dtype=float)
    obs = np.asarray(obs_speed, dtype=float)
    if sim.shape != obs.shape:
        raise ValueError(f"shape mismatch: {sim.shape} vs {obs.shape}")
    keep = obs >= floor
    excluded = int(keep.size - keep.sum())
    value = float(np.mean(np.abs(sim[keep] - obs[keep]) / obs[keep]) * 100.0) if keep.any() else float("nan")
    return (value, excluded) if return_excluded else value


@dataclass
class LossInfo:
    blew_up: bool = False
    failure_time: int | None = None
    clamp_events: int = 0


@dataclass
class WindowObjective:
    """Loss over ``[t0, t1]`` as a function of normalised parameters.

    ``template`` fixes the parameter layout; ``breakpoints`` map its blocks to
    absolute time. ``anchor`` and ``jump_weight`` add
    ``jump_weight * ||x - anchor||^2`` in normalised coordinates.
    """

    observed: ObservedField
    bc: BoundaryConditions
    geom: NetworkGeometry
    template: ParameterVector
    breakpoints: tuple[int, ...] = (0,)
    t0: int = 0
    t1: int | None = None
    start_state: TrafficState | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    options: ModelOptions = DEFAULT_OPTIONS
    anchor: np.ndarray | None = None
    jump_weight: float = 0.0
    n_evals: int = 0
    n_blowups: int = 0

    def __post_init__(self):
        if self.t1 is None:
            self.t1 = min(self.observed.horizon, len(self.bc))
        if not 0 <= self.t0 <= self.t1 <= min(self.observed.horizon, len(self.bc)):
            raise ValueError(f"window [{self.t0}, {self.t1}] outside the data horizon")
        if self.start_state is None:
            self.start_state = self.observed.state_at(self.t0, self.geom)
        sl = slice(self.t0 + 1, self.t1 + 1)
        self._obs = {
            "speed": self.observed.speed_obs[sl],
            "density": None if self.observed.density_obs is None else self.observed.density_obs[sl],
            "flow": None if self.observed.flow_obs is None else self.observed.flow_obs[sl],
        }
        for comp in ("density", "flow"):
            if getattr(self.loss, f"{comp}_weight") and self._obs[comp] is None:
                raise ValueError(f"{comp}_weight > 0 needs an observed {comp} grid")

    @property
    def n_steps(self) -> int:
        return self.t1 - self.t0

    def schedule(self, xn) -> ParameterSchedule:
        return ParameterSchedule(self.breakpoints, self.template.blocks_from_normalized(xn))

    def _score(self, rho, v):
        """Residual loss over states 1..T of a rollout."""
        lanes = self.geom.lanes_array
        cfg = self.loss
        total = 0.0
        if cfg.speed_weight:
            total += cfg.speed_weight * float(np.sum((v[1:] - self._obs["speed"]) ** 2))
        if cfg.density_weight:
            total += cfg.density_weight * float(np.sum((rho[1:] - self._obs["density"]) ** 2))
        if cfg.flow_weight:
            total += cfg.flow_weight * float(np.sum((rho[1:] * v[1:] * lanes - self._obs["flow"]) ** 2))
        return total

    def _penalty(self, xn):
        if self.anchor is None or not self.jump_weight:
            return 0.0
        d = np.asarray(xn) - self.anchor
        return self.jump_weight * float(d @ d)

    def simulate(self, xn):
        sched = self.schedule(xn)
        return simulate(self.start_state, sched, self.bc.window(self.t0, self.t1), self.geom,
                        self.options, start=self.t0)

    def value(self, xn, info: LossInfo | None = None) -> float:
        self.n_evals += 1
        try:
            traj = self.simulate(xn)
        except NumericalError as err:
            self.n_blowups += 1
            if info is not None:
                info.blew_up, info.failure_time = True, err.time_index
            return BLOWUP_PENALTY * (self.t1 - err.time_index)
        if info is not None:
            info.clamp_events = traj.total_clamp_events
        return self._score(traj.density, traj.speed) + self._penalty(xn)

    def value_and_grad(self, xn, info: LossInfo | None = None) -> tuple[float, np.ndarray]:
        """Loss and its exact gradient (reverse-mode through the rollout)."""
        self.n_evals += 1
        xn = np.asarray(xn, dtype=float)
        sched = self.schedule(xn)
        geom, options = self.geom, self.options
        T, S = self.n_steps, geom.num_segments
        up_q = self.bc.upstream_flow[self.t0:self.t1]
        up_v = self.bc.upstream_speed[self.t0:self.t1]
        down = self.bc.downstream_density[self.t0:self.t1]
        blk = sched.step_block_indices(T, self.t0)
        rho = np.empty((T + 1, S))
        v = np.empty((T + 1, S))
        rho[0], v[0] = self.start_state.density, self.start_state.speed
        masks = [None] * T
        n_clamp = 0
        for t in range(T):
            try:
                rho[t + 1], v[t + 1], n, m_rho, m_v = _advance(rho[t], v[t], sched.blocks[blk[t]],
                                                                (up_q[t], up_v[t], down[t]), geom, options)
            except NumericalError:
                self.n_blowups += 1
                if info is not None:
                    info.blew_up, info.failure_time = True, self.t0 + t
                return BLOWUP_PENALTY * (T - t), np.zeros_like(xn)
            n_clamp += n
            if n:
                masks[t] = (m_rho, m_v)
        if info is not None:
            info.clamp_events = n_clamp

        value = self._score(rho, v) + self._penalty(xn)
        cfg = self.loss
        lanes = geom.lanes_array
        g_blocks = np.zeros_like(sched.blocks)
        lam_rho = np.zeros(S)
        lam_v = np.zeros(S)
        obs_v, obs_rho, obs_q = self._obs["speed"], self._obs["density"], self._obs["flow"]
        for t in range(T - 1, -1, -1):
            k = t + 1
            if cfg.speed_weight:
                lam_v = lam_v + 2.0 * cfg.speed_weight * (v[k] - obs_v[t])
            if cfg.density_weight:
                lam_rho = lam_rho + 2.0 * cfg.density_weight * (rho[k] - obs_rho[t])
            if cfg.flow_weight:
                rq = 2.0 * cfg.flow_weight * (rho[k] * v[k] * lanes - obs_q[t])
                lam_rho = lam_rho + rq * v[k] * lanes
                lam_v = lam_v + rq * rho[k] * lanes
            m_rho, m_v = masks[t] if masks[t] is not None else (None, None)
            lam_rho, lam_v, g_p = step_vjp(rho[t], v[t], sched.blocks[blk[t]], (up_q[t], up_v[t], down[t]),
                                           geom, options, lam_rho, lam_v, m_rho, m_v)
            g_blocks[blk[t]] += g_p
        grad = self.template.scatter_gradient(g_blocks)
        if self.anchor is not None and self.jump_weight:
            grad = grad + 2.0 * self.jump_weight * (xn - self.anchor)
        return value, grad

    def fd_gradient(self, xn, mode: str = "forward", h: float = 1e-6) -> np.ndarray:
        """Finite-difference gradient in normalised coordinates."""
        xn = np.asarray(xn, dtype=float)
        g = np.empty_like(xn)
        f0 = self.value(xn) if mode == "forward" else None
        for i in range(xn.size):
            e = np.zeros_like(xn)
            e[i] = h
            if mode == "forward":
                g[i] = (self.value(xn + e) - f0) / h
            elif mode == "central":
                g[i] = (self.value(xn + e) - self.value(xn - e)) / (2.0 * h)
            else:
                raise ValueError(f"unknown finite-difference mode {mode!r}")
        return g


def _objective(theta, observed, bc, geom, time_window, breakpoints, start_state, loss, options):
    t0, t1 = time_window if time_window is not None else (0, None)
    return WindowObjective(observed, bc, geom, theta, tuple(breakpoints), t0, t1, start_state,
                           loss or LossConfig(), options)


def sse_loss(theta: ParameterVector, observed: ObservedField, bc: BoundaryConditions, geom: NetworkGeometry,
             time_window=None, *, breakpoints=(0,), start_state=None, loss: LossConfig | None = None,
             options: ModelOptions = DEFAULT_OPTIONS, return_info: bool = False):
    """Sum of squared residuals of the scored components over ``time_window``.

    ``time_window`` is ``(t0, t1)``; the rollout starts at ``t0`` from
    ``start_state`` (default: the observed state at ``t0``).
    """
    obj = _objective(theta, observed, bc, geom, time_window, breakpoints, start_state, loss, options)
    info = LossInfo()
    value = obj.value(theta.normalized(), info)
    return (value, info) if return_info else value


def loss_gradient(theta: ParameterVector, observed: ObservedField, bc: BoundaryConditions, geom: NetworkGeometry,
                  time_window=None, *, mode: str = "forward", h: float = 1e-6, breakpoints=(0,),
                  start_state=None, loss: LossConfig | None = None,
                  options: ModelOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Gradient of :func:`sse_loss` in normalised coordinates.

    ``mode`` is ``"forward"`` or ``"central"`` (finite differences with step
    ``h`` in normalised units) or ``"exact"`` (reverse-mode through the rollout).
    """
    obj = _objective(theta, observed, bc, geom, time_window, breakpoints, start_state, loss, options)
    xn = theta.normalized()
    if mode == "exact":
        return obj.value_and_grad(xn)[1]
    return obj.fd_gradient(xn, mode=mode, h=h)
