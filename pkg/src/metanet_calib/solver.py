"""Projected limited-memory BFGS for box-constrained minimisation.

The quasi-Newton direction is built on the free variables only (those not
pinned at a bound by the gradient); the trial point is projected back onto
the box and accepted by a backtracking Armijo test on the projected step.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

CONVERGED = "gradient-tolerance"
STAGNATION = "stagnation"
MAX_ITERATIONS = "max-iterations"
NO_DESCENT = "no-descent"
LINE_SEARCH_FAILURE = "line-search-failure"
TERMINATION_REASONS = (CONVERGED, STAGNATION, MAX_ITERATIONS, NO_DESCENT, LINE_SEARCH_FAILURE)


@dataclass(frozen=True)
class LineSearchConfig:
    armijo_c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 30
    initial_step: float = 0.05  # steepest-descent step length (normalised box units)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 200
    tolerance: float = 1e-12
    history_size: int = 10
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)
    seed: int = 0
    ftol: float = 1e-12
    xtol: float = 1e-12
    gradient: str = "exact"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.history_size < 1:
            raise ValueError("history_size must be at least 1")
        if self.gradient not in ("exact", "forward", "central"):
            raise ValueError(f"unknown gradient mode {self.gradient!r}")


@dataclass
class SolverResult:
    x: np.ndarray
    fun: float
    trace: list[float]
    iterations: int
    reason: str
    n_evaluations: int


def _two_loop(g, memory, free):
    q = g[free].copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * (s[free] @ q)
        alphas.append(a)
        q -= a * y[free]
    s, y, _ = memory[-1]
    sy, yy = s[free] @ y[free], y[free] @ y[free]
    q *= sy / yy if sy > 0 and yy > 0 else 1.0
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * (y[free] @ q)
        q += (a - b) * s[free]
    d = np.zeros_like(g)
    d[free] = -q
    return d


def minimize_box(fun_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]], x0, lower, upper,
                 cfg: SolverConfig = SolverConfig()) -> SolverResult:
    """Minimise ``f`` over ``lower <= x <= upper`` starting from ``x0``.

    ``trace`` holds the objective at every accepted iterate, starting with
    ``f(x0)``; it is non-increasing by construction.
    """
    lower = np.broadcast_to(np.asarray(lower, float), np.shape(x0))
    upper = np.broadcast_to(np.asarray(upper, float), np.shape(x0))
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    f, g = fun_and_grad(x)
    n_evals = 1
    trace = [f]
    memory: deque = deque(maxlen=cfg.history_size)
    ls = cfg.line_search
    reason = MAX_ITERATIONS
    k = 0
    while k < cfg.max_iterations:
        pg = np.clip(x - g, lower, upper) - x
        if np.max(np.abs(pg), initial=0.0) <= cfg.tolerance:
            reason = CONVERGED
            break
        span = upper - lower
        eps = 1e-12 * np.maximum(span, 1.0)
        pinned = ((x <= lower + eps) & (g > 0)) | ((x >= upper - eps) & (g < 0))
        free = ~pinned

        accepted = False
        for use_memory in ((True, False) if memory else (False,)):
            if use_memory:
                d = _two_loop(g, memory, free)
                if not g @ d < 0:
                    continue
            else:
                d = np.where(free, -g, 0.0)
                gmax = np.max(np.abs(d), initial=0.0)
                if gmax == 0:
                    break
                d *= ls.initial_step / gmax
            alpha = 1.0
            for _ in range(ls.max_backtracks):
                x_new = np.clip(x + alpha * d, lower, upper)
                s = x_new - x
                if not np.any(s):
                    break
                f_new, g_new = fun_and_grad(x_new)
                n_evals += 1
                slope = min(float(g @ s), 0.0)
                if np.isfinite(f_new) and f_new <= f + ls.armijo_c1 * slope and f_new <= f:
                    accepted = True
                    break
                alpha *= ls.shrink
            if accepted:
                break
            memory.clear()
        if not accepted:
            reason = NO_DESCENT if k == 0 else LINE_SEARCH_FAILURE
            break

        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            memory.append((s, y, 1.0 / sy))
        k += 1
        f_prev = f
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if np.max(np.abs(s)) <= cfg.xtol:
            reason = STAGNATION
            break
        if f_prev - f <= cfg.ftol * max(abs(f_prev), abs(f), 1.0):
            reason = STAGNATION
            break
    return SolverResult(x, f, trace, k, reason, n_evals)
