"""METANET link model: fundamental diagram, explicit step and rollout.

Units are km, hours and vehicles throughout. The time step is stored in
seconds on :class:`NetworkGeometry` and converted once. Density is per lane
(veh/km/lane) and flow is the total across lanes (veh/h), so that
``q = rho * v * lanes``.

Per-segment parameters are carried as a float array of shape ``(S, 8)`` whose
columns follow :data:`PARAM_NAMES`. :class:`SegmentParameters` is the
record-style view of one row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PARAM_NAMES = ("tau_h", "eta", "kappa", "a", "v_free_kmh", "rho_cr", "beta", "r_vph")
TAU, ETA, KAPPA, A, VFREE, RHOCR, BETA, R = range(8)
N_PARAMS = len(PARAM_NAMES)
# the six fundamental-diagram / speed-dynamics parameters, excluding ramps
CORE_PARAMS = PARAM_NAMES[:6]

FD_TYPESET = "typeset"
FD_CLASSICAL = "classical"


class NumericalError(ArithmeticError):
    """A rollout produced a non-finite (or, in strict mode, negative) value."""

    def __init__(self, message, segment=None, term=None, time_index=None):
        super().__init__(message)
        self.segment = segment
        self.term = term
        self.time_index = time_index

    def with_time(self, t):
        err = NumericalError(f"t={t}: {self.args[0]}", self.segment, self.term, t)
        return err


@dataclass(frozen=True)
class NetworkGeometry:
    num_segments: int
    segment_length_km: float
    time_step_s: float
    lanes: tuple[int, ...]
    onramp_segments: frozenset[int] = frozenset()
    offramp_segments: frozenset[int] = frozenset()

    def __post_init__(self):
        lanes = tuple(int(x) for x in np.broadcast_to(self.lanes, (self.num_segments,)))
        object.__setattr__(self, "lanes", lanes)
        object.__setattr__(self, "onramp_segments", frozenset(int(i) for i in self.onramp_segments))
        object.__setattr__(self, "offramp_segments", frozenset(int(i) for i in self.offramp_segments))
        if self.num_segments < 1:
            raise ValueError("num_segments must be positive")
        if not self.segment_length_km > 0 or not self.time_step_s > 0:
            raise ValueError("segment_length_km and time_step_s must be positive")
        if min(self.lanes) < 1:
            raise ValueError("every segment needs at least one lane")
        valid = set(range(self.num_segments))
        for name in ("onramp_segments", "offramp_segments"):
            bad = set(getattr(self, name)) - valid
            if bad:
                raise ValueError(f"{name} contains invalid indices {sorted(bad)}")

    @property
    def dt_h(self) -> float:
        return self.time_step_s / 3600.0

    @property
    def lanes_array(self) -> np.ndarray:
        return np.asarray(self.lanes, dtype=float)

    @property
    def onramp_mask(self) -> np.ndarray:
        m = np.zeros(self.num_segments, dtype=bool)
        m[list(self.onramp_segments)] = True
        return m

    @property
    def offramp_mask(self) -> np.ndarray:
        m = np.zeros(self.num_segments, dtype=bool)
        m[list(self.offramp_segments)] = True
        return m


@dataclass(frozen=True)
class SegmentParameters:
    tau_h: float
    eta: float
    kappa: float
    a: float
    v_free_kmh: float
    rho_cr: float
    beta: float = 0.0
    r_vph: float = 0.0

    def __post_init__(self):
        for name in CORE_PARAMS:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if not self.r_vph >= 0:
            raise ValueError(f"r_vph must be nonnegative, got {self.r_vph}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, row) -> "SegmentParameters":
        return cls(*(float(x) for x in row))


def stack_params(params: Sequence[SegmentParameters] | np.ndarray, geom: NetworkGeometry) -> np.ndarray:
    """Return an ``(S, 8)`` parameter array, validating ramp placement."""
    if isinstance(params, np.ndarray):
        arr = np.array(params, dtype=float)
    else:
        arr = np.array([p.as_array() for p in params], dtype=float)
    if arr.shape != (geom.num_segments, N_PARAMS):
        raise ValueError(f"expected parameter array of shape {(geom.num_segments, N_PARAMS)}, got {arr.shape}")
    if np.any(arr[~geom.offramp_mask, BETA] != 0):
        raise ValueError("beta must be zero on segments without an off-ramp")
    if np.any(arr[~geom.onramp_mask, R] != 0):
        raise ValueError("r_vph must be zero on segments without an on-ramp")
    return arr


@dataclass(frozen=True)
class ModelOptions:
    """Numerical switches for the simulator.

    ``fd_form`` selects the fundamental diagram: ``"typeset"`` evaluates
    ``exp(-(rho / (a * rho_cr)) ** a)``, ``"classical"`` evaluates
    ``exp(-(rho / rho_cr) ** a / a)``. In strict mode nothing is clamped and a
    negative or non-finite value raises :class:`NumericalError`; otherwise
    values below the floors are clamped and counted.
    """

    fd_form: str = FD_TYPESET
    strict: bool = False
    speed_floor: float = 0.0
    density_floor: float = 0.0

    def __post_init__(self):
        if self.fd_form not in (FD_TYPESET, FD_CLASSICAL):
            raise ValueError(f"unknown fd_form {self.fd_form!r}")


DEFAULT_OPTIONS = ModelOptions()


@dataclass(frozen=True)
class TrafficState:
    density: np.ndarray
    speed: np.ndarray
    flow: np.ndarray
    clamp_events: int = 0

    @classmethod
    def from_density_speed(cls, density, speed, geom: NetworkGeometry, clamp_events: int = 0) -> "TrafficState":
        rho = np.asarray(density, dtype=float).copy()
        v = np.asarray(speed, dtype=float).copy()
        if rho.shape != (geom.num_segments,) or v.shape != (geom.num_segments,):
            raise ValueError("state vectors must have one entry per segment")
        return cls(rho, v, rho * v * geom.lanes_array, clamp_events)

    def validate(self):
        for name in ("density", "speed", "flow"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"state {name} has non-finite entries")
            if np.any(arr < 0):
                raise ValueError(f"state {name} has negative entries")


@dataclass(frozen=True)
class BoundaryConditions:
    upstream_flow: np.ndarray
    upstream_speed: np.ndarray
    downstream_density: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, n), dtype=float) for n in ("upstream_flow", "upstream_speed", "downstream_density")]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise ValueError("boundary series must be 1-D with identical length")
        for name, arr in zip(("upstream_flow", "upstream_speed", "downstream_density"), arrays):
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.upstream_flow)

    def at(self, t: int) -> tuple[float, float, float]:
        return float(self.upstream_flow[t]), float(self.upstream_speed[t]), float(self.downstream_density[t])

    def window(self, t0: int, t1: int) -> "BoundaryConditions":
        return BoundaryConditions(self.upstream_flow[t0:t1], self.upstream_speed[t0:t1], self.downstream_density[t0:t1])

    def with_upstream_flow(self, flow) -> "BoundaryConditions":
        return BoundaryConditions(np.asarray(flow, dtype=float), self.upstream_speed, self.downstream_density)


@dataclass(frozen=True)
class ParameterSchedule:
    """Piecewise-constant parameters: block ``k`` applies from ``breakpoints[k]``."""

    breakpoints: tuple[int, ...]
    blocks: np.ndarray  # (n_blocks, S, 8)

    def __post_init__(self):
        bp = tuple(int(b) for b in self.breakpoints)
        blocks = np.array(self.blocks, dtype=float)
        if blocks.ndim != 3 or blocks.shape[2] != N_PARAMS:
            raise ValueError("blocks must have shape (n_blocks, S, 8)")
        if len(bp) != blocks.shape[0]:
            raise ValueError("need one breakpoint per block")
        if not bp or bp[0] != 0 or any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
            raise ValueError("breakpoints must start at 0 and strictly increase")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def constant(cls, params) -> "ParameterSchedule":
        return cls((0,), np.asarray(params, dtype=float)[None])

    @property
    def n_blocks(self) -> int:
        return len(self.breakpoints)

    def block_index(self, t) -> np.ndarray | int:
        return np.searchsorted(self.breakpoints, t, side="right") - 1

    def params_at(self, t: int) -> np.ndarray:
        return self.blocks[self.block_index(t)]

    def step_block_indices(self, horizon: int, start: int = 0) -> np.ndarray:
        return np.asarray(self.block_index(np.arange(start, start + horizon)), dtype=int)

    def covers(self, horizon: int) -> bool:
        return horizon == 0 or self.breakpoints[-1] < horizon or self.n_blocks == 1

    def replace_blocks(self, blocks) -> "ParameterSchedule":
        return ParameterSchedule(self.breakpoints, blocks)


@dataclass(frozen=True)
class Trajectory:
    """Rollout ``x_0 .. x_H`` stored as ``(H+1, S)`` grids."""

    density: np.ndarray
    speed: np.ndarray
    flow: np.ndarray
    clamp_events: np.ndarray  # (H,) events per step

    @property
    def horizon(self) -> int:
        return self.density.shape[0] - 1

    @property
    def total_clamp_events(self) -> int:
        return int(self.clamp_events.sum())

    @property
    def states(self) -> list[TrafficState]:
        clamps = np.concatenate([[0], self.clamp_events])
        return [TrafficState(self.density[t], self.speed[t], self.flow[t], int(clamps[t])) for t in range(self.horizon + 1)]

    def state(self, t: int) -> TrafficState:
        return TrafficState(self.density[t].copy(), self.speed[t].copy(), self.flow[t].copy())


def equilibrium_speed(rho, params, fd_form: str = FD_TYPESET):
    """Equilibrium speed ``V(rho)`` for scalar or per-segment ``params``.

    ``params`` may be a :class:`SegmentParameters`, a parameter row/array
    (last axis ordered as :data:`PARAM_NAMES`).
    """
    if isinstance(params, SegmentParameters):
        params = params.as_array()
    params = np.asarray(params, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if not np.all(np.isfinite(rho)) or not np.all(np.isfinite(params)):
        raise ValueError("equilibrium_speed needs finite inputs")
    a = params[..., A]
    z = _fd_exponent(rho, a, params[..., RHOCR], fd_form)
    out = params[..., VFREE] * np.exp(-z)
    return float(out) if out.ndim == 0 else out


def _fd_exponent(rho, a, rho_cr, fd_form):
    if fd_form == FD_TYPESET:
        return (rho / (a * rho_cr)) ** a
    if fd_form == FD_CLASSICAL:
        return (rho / rho_cr) ** a / a
    raise ValueError(f"unknown fd_form {fd_form!r}")


def fd_exponent_partials(rho, a, rho_cr, fd_form):
    """Return ``z`` and its partials with respect to rho, a and rho_cr."""
    pos = rho > 0
    safe = np.where(pos, rho, 1.0)
    if fd_form == FD_TYPESET:
        base = safe / (a * rho_cr)
        z = np.where(pos, base**a, 0.0)
        dz_drho = np.where(pos, base ** (a - 1.0) / rho_cr, np.where(a == 1.0, 1.0 / (a * rho_cr), 0.0))
        dz_da = z * (np.log(base) - 1.0)
    else:
        base = safe / rho_cr
        z = np.where(pos, base**a / a, 0.0)
        dz_drho = np.where(pos, base ** (a - 1.0) / rho_cr, np.where(a == 1.0, 1.0 / rho_cr, 0.0))
        dz_da = z * (np.log(base) - 1.0 / a)
    dz_drcr = -a * z / rho_cr
    return z, dz_drho, np.where(pos, dz_da, 0.0), dz_drcr


def cfl_check(geom: NetworkGeometry, v_free_max: float) -> tuple[bool, float]:
    """Return ``(ok, ratio)`` where ratio is ``(L / delta) / v_free_max``.

    ``ok`` holds when the ratio is at least one.
    """
    limit = geom.segment_length_km / geom.dt_h
    ratio = limit / float(v_free_max)
    return bool(limit >= v_free_max), ratio


def cfl_limit_kmh(geom: NetworkGeometry) -> float:
    return geom.segment_length_km / geom.dt_h


# ---------------------------------------------------------------------------
# step


def _raw_update(rho, v, p, q_up, v_up, rho_down, lanes, dt, length, fd_form):
    """Unclamped next density/speed plus the named terms (for diagnostics)."""
    q = rho * v * lanes
    q_prev = np.empty_like(q)
    q_prev[0] = q_up
    q_prev[1:] = q[:-1]
    v_prev = np.empty_like(v)
    v_prev[0] = v_up
    v_prev[1:] = v[:-1]
    rho_next = np.empty_like(rho)
    rho_next[-1] = rho_down
    rho_next[:-1] = rho[1:]

    tau = p[:, TAU]
    flux = dt / (length * lanes) * (q_prev - q / (1.0 - p[:, BETA]) + p[:, R])
    z = _fd_exponent(rho, p[:, A], p[:, RHOCR], fd_form)
    v_eq = p[:, VFREE] * np.exp(-z)
    relax = dt / tau * (v_eq - v)
    conv = dt / length * v * (v_prev - v)
    antic = -(p[:, ETA] * dt) / (tau * length) * (rho_next - rho) / (rho + p[:, KAPPA])
    return rho + flux, v + relax + conv + antic, (("density_flux", flux), ("equilibrium_speed", v_eq),
                                                  ("relaxation", relax), ("convection", conv), ("anticipation", antic))


def _advance(rho, v, p, bc_t, geom, options):
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        rho_raw, v_raw, terms = _raw_update(rho, v, p, bc_t[0], bc_t[1], bc_t[2], geom.lanes_array,
                                            geom.dt_h, geom.segment_length_km, options.fd_form)
    bad = ~(np.isfinite(rho_raw) & np.isfinite(v_raw))
    if bad.any():
        seg = int(np.flatnonzero(bad)[0])
        term = next((name for name, arr in terms if not np.isfinite(arr[seg])), "state")
        raise NumericalError(f"non-finite {term} at segment {seg}", segment=seg, term=term)
    if options.strict:
        neg = (rho_raw < 0) | (v_raw < 0)
        if neg.any():
            seg = int(np.flatnonzero(neg)[0])
            term = "density" if rho_raw[seg] < 0 else "speed"
            raise NumericalError(f"negative {term} at segment {seg}", segment=seg, term=term)
        return rho_raw, v_raw, 0, None, None
    rho_low = rho_raw < options.density_floor
    v_low = v_raw < options.speed_floor
    n = int(rho_low.sum() + v_low.sum())
    if n:
        rho_raw = np.where(rho_low, options.density_floor, rho_raw)
        v_raw = np.where(v_low, options.speed_floor, v_raw)
        return rho_raw, v_raw, n, rho_low, v_low
    return rho_raw, v_raw, 0, None, None


def step(state: TrafficState, params, bc_at_t, geom: NetworkGeometry, options: ModelOptions = DEFAULT_OPTIONS) -> TrafficState:
    """Advance one time step.

    ``bc_at_t`` is ``(upstream_flow, upstream_speed, downstream_density)``.
    Segment 0 sees a virtual upstream neighbour with the given flow and speed;
    the last segment sees the downstream density in its anticipation term and
    its own flow as outflow.
    """
    p = stack_params(params, geom) if not isinstance(params, np.ndarray) else np.asarray(params, dtype=float)
    rho, v, n, _, _ = _advance(np.asarray(state.density, float), np.asarray(state.speed, float), p, bc_at_t, geom, options)
    return TrafficState(rho, v, rho * v * geom.lanes_array, n)


def simulate(initial: TrafficState, schedule: ParameterSchedule | np.ndarray, bc: BoundaryConditions,
             geom: NetworkGeometry, options: ModelOptions = DEFAULT_OPTIONS, start: int = 0,
             horizon: int | None = None) -> Trajectory:
    """Roll the model forward from ``initial``.

    Boundary conditions are indexed from 0 and schedule blocks are looked up
    at absolute time ``start + t``; by default the horizon is ``len(bc)``.
    """
    if isinstance(schedule, np.ndarray):
        schedule = ParameterSchedule.constant(schedule)
    H = len(bc) if horizon is None else horizon
    if H > len(bc):
        raise ValueError(f"boundary conditions cover {len(bc)} steps, horizon is {H}")
    S = geom.num_segments
    rho_out = np.empty((H + 1, S))
    v_out = np.empty((H + 1, S))
    clamps = np.zeros(H, dtype=int)
    rho = np.asarray(initial.density, float).copy()
    v = np.asarray(initial.speed, float).copy()
    rho_out[0], v_out[0] = rho, v
    blocks = schedule.step_block_indices(H, start)
    up_q, up_v, down_rho = bc.upstream_flow, bc.upstream_speed, bc.downstream_density
    for t in range(H):
        try:
            rho, v, clamps[t], _, _ = _advance(rho, v, schedule.blocks[blocks[t]], (up_q[t], up_v[t], down_rho[t]), geom, options)
        except NumericalError as err:
            raise err.with_time(start + t) from None
        rho_out[t + 1], v_out[t + 1] = rho, v
    return Trajectory(rho_out, v_out, rho_out * v_out * geom.lanes_array, clamps)


def equilibrium_state(rho, params, geom: NetworkGeometry, fd_form: str = FD_TYPESET) -> TrafficState:
    """Uniform-in-type state with ``v = V(rho)`` per segment."""
    p = np.broadcast_to(np.asarray(params, float), (geom.num_segments, N_PARAMS))
    rho = np.broadcast_to(np.asarray(rho, float), (geom.num_segments,)).copy()
    return TrafficState.from_density_speed(rho, equilibrium_speed(rho, p, fd_form), geom)


# ---------------------------------------------------------------------------
# reverse-mode derivative of one step


def step_vjp(rho, v, p, bc_t, geom, options, g_rho_new, g_v_new, clamp_rho, clamp_v):
    """Pull back cotangents of ``(rho', v')`` through one step.

    ``clamp_rho``/``clamp_v`` mark entries that were clamped in the forward
    pass (their derivative is zero). Returns ``(g_rho, g_v, g_params)`` with
    ``g_params`` shaped like ``p``.
    """
    lanes = geom.lanes_array
    dt, length = geom.dt_h, geom.segment_length_km
    q_up, v_up, rho_down = bc_t
    gr = g_rho_new if clamp_rho is None else np.where(clamp_rho, 0.0, g_rho_new)
    gv = g_v_new if clamp_v is None else np.where(clamp_v, 0.0, g_v_new)

    tau, eta, kappa = p[:, TAU], p[:, ETA], p[:, KAPPA]
    a, vfree, rcr, beta = p[:, A], p[:, VFREE], p[:, RHOCR], p[:, BETA]
    v_prev = np.concatenate([[v_up], v[:-1]])
    rho_next = np.concatenate([rho[1:], [rho_down]])
    z, dz_drho, dz_da, dz_drcr = fd_exponent_partials(rho, a, rcr, options.fd_form)
    ez = np.exp(-z)
    v_eq = vfree * ez
    c = dt / (length * lanes)
    one_b = 1.0 - beta
    q = rho * v * lanes
    rk = rho + kappa
    drho_diff = rho_next - rho
    antic_coef = eta * dt / (tau * length)

    g_rho = np.zeros_like(rho)
    g_v = np.zeros_like(v)
    g_p = np.zeros_like(p)

    # density update
    g_rho += gr * (1.0 - c * v * lanes / one_b)
    g_v += gr * (-c * rho * lanes / one_b)
    g_rho[:-1] += gr[1:] * c[1:] * v[:-1] * lanes[:-1]
    g_v[:-1] += gr[1:] * c[1:] * rho[:-1] * lanes[:-1]
    g_p[:, BETA] += gr * (-c * q / one_b**2)
    g_p[:, R] += gr * c

    # speed update
    dveq = -v_eq
    g_v += gv * (1.0 - dt / tau + dt / length * (v_prev - 2.0 * v))
    g_v[:-1] += gv[1:] * (dt / length * v[1:])
    g_rho += gv * (dt / tau * dveq * dz_drho + antic_coef * (rho_next + kappa) / rk**2)
    g_rho[1:] += gv[:-1] * (-antic_coef[:-1] / rk[:-1])
    ratio = drho_diff / rk
    g_p[:, TAU] += gv * (-dt / tau**2 * (v_eq - v) + eta * dt / (tau**2 * length) * ratio)
    g_p[:, ETA] += gv * (-dt / (tau * length) * ratio)
    g_p[:, KAPPA] += gv * (antic_coef * drho_diff / rk**2)
    g_p[:, A] += gv * (dt / tau * dveq * dz_da)
    g_p[:, VFREE] += gv * (dt / tau * ez)
    g_p[:, RHOCR] += gv * (dt / tau * dveq * dz_drcr)
    return g_rho, g_v, g_p
