"""Projected L-BFGS box solver, checked against scipy's L-BFGS-B."""

import numpy as np
import pytest
from scipy.optimize import minimize

from metanet_calib.solver import (
    CONVERGED,
    NO_DESCENT,
    LineSearchConfig,
    SolverConfig,
    minimize_box,
)


def quadratic(A, b):
    def fg(x):
        r = A @ x - b
        return 0.5 * float(r @ r), A.T @ r
    return fg


def rosenbrock(x):
    f = float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))
    g = np.zeros_like(x)
    g[:-1] = -400.0 * x[:-1] * (x[1:] - x[:-1] ** 2) - 2 * (1 - x[:-1])
    g[1:] += 200.0 * (x[1:] - x[:-1] ** 2)
    return f, g


CFG = SolverConfig(max_iterations=2000, tolerance=1e-10, ftol=1e-16, xtol=1e-14,
                   line_search=LineSearchConfig(initial_step=0.5))


class TestAgainstScipy:
    @pytest.mark.parametrize("seed", range(5))
    def test_box_quadratic_with_active_bounds(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(8, 6))
        b = rng.normal(size=8) * 3
        lo, hi = np.zeros(6), np.full(6, 0.6)
        fg = quadratic(A, b)
        ours = minimize_box(fg, np.full(6, 0.3), lo, hi, CFG)
        ref = minimize(fg, np.full(6, 0.3), jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"ftol": 1e-15, "gtol": 1e-12})
        assert ours.fun == pytest.approx(ref.fun, rel=1e-7, abs=1e-10)
        np.testing.assert_allclose(ours.x, ref.x, atol=1e-5)

    def test_rosenbrock_in_box(self):
        lo, hi = np.full(4, -0.5), np.full(4, 0.8)
        ours = minimize_box(rosenbrock, np.zeros(4), lo, hi, CFG)
        ref = minimize(rosenbrock, np.zeros(4), jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 5000})
        assert ours.fun == pytest.approx(ref.fun, rel=1e-6, abs=1e-10)
        np.testing.assert_allclose(ours.x, ref.x, atol=1e-4)


class TestSolverProperties:
    def test_trace_monotone_and_feasible(self):
        seen = []
        lo, hi = np.full(5, -0.2), np.full(5, 1.5)

        def fg(x):
            seen.append(x.copy())
            return rosenbrock(x)
        res = minimize_box(fg, np.full(5, 1.2), lo, hi, SolverConfig(max_iterations=300))
        assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
        assert all(np.all(x >= lo) and np.all(x <= hi) for x in seen)
        assert res.fun <= res.trace[0]

    def test_converged_at_minimum(self):
        fg = quadratic(np.eye(3), np.array([0.2, 0.4, 0.6]))
        res = minimize_box(fg, np.array([0.2, 0.4, 0.6]), 0.0, 1.0)
        assert res.reason == CONVERGED and res.iterations == 0

    def test_no_descent_returns_start(self):
        # gradient claims descent that the function never delivers
        def fg(x):
            return float(np.sum(x ** 2)) + 1.0, -np.ones_like(x)
        x0 = np.full(3, 0.5)
        res = minimize_box(fg, x0, 0.0, 1.0)
        assert res.reason == NO_DESCENT
        np.testing.assert_array_equal(res.x, x0)
        assert res.trace == [1.75]

    def test_start_clipped_into_box(self):
        fg = quadratic(np.eye(2), np.zeros(2))
        res = minimize_box(fg, np.array([3.0, -1.0]), 0.0, 1.0)
        assert np.all(res.x >= 0) and np.all(res.x <= 1)

    def test_deterministic(self):
        a = minimize_box(rosenbrock, np.zeros(3), -1.0, 1.0)
        b = minimize_box(rosenbrock, np.zeros(3), -1.0, 1.0)
        assert a.x.tobytes() == b.x.tobytes() and a.trace == b.trace

    @pytest.mark.parametrize("kwargs", [{"tolerance": 0.0}, {"max_iterations": 0}, {"history_size": 0},
                                        {"gradient": "magic"}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            SolverConfig(**kwargs)
