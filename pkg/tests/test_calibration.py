"""Static calibration."""

import numpy as np
import pytest

from metanet_calib.calibration import calibrate_static, score_schedule
from metanet_calib.objective import LossConfig
from metanet_calib.params import Bounds, ParameterVector, default_free_mask, default_warm_start
from metanet_calib.solver import SolverConfig
from metanet_calib.synthetic import preset


@pytest.fixture(scope="module")
def small():
    return preset("small", obs_noise=0.0)


def fit(bundle, warm=None, iters=15, **kw):
    g = bundle.geometry
    bounds = kw.pop("bounds", Bounds.from_mapping(g))
    warm = default_warm_start(g) if warm is None else warm
    return calibrate_static(bundle.observed, bundle.bc, g, bounds, warm, SolverConfig(max_iterations=iters), **kw)


class TestCalibrateStatic:
    def test_truth_warm_start_stops_immediately(self, small):
        res = fit(small, warm=small.truth.blocks[0])
        assert res.iterations <= 1
        assert res.final_loss == pytest.approx(0.0, abs=1e-12)
        assert res.final_mape == pytest.approx(0.0, abs=1e-9)

    def test_loss_decreases_and_trace_monotone(self, small):
        res = fit(small)
        assert res.final_loss <= res.loss_trace[0]
        assert all(b <= a for a, b in zip(res.loss_trace, res.loss_trace[1:]))
        assert res.final_loss == pytest.approx(res.loss_trace[-1], rel=1e-12)
        assert res.theta_star.in_bounds()
        assert res.method == "static" and res.schedule.n_blocks == 1

    def test_reproducible(self, small):
        a, b = fit(small, iters=5), fit(small, iters=5)
        assert a.theta_star.blocks.tobytes() == b.theta_star.blocks.tobytes()
        assert a.loss_trace == b.loss_trace and a.termination_reason == b.termination_reason

    def test_warm_start_outside_bounds(self, small):
        warm = default_warm_start(small.geometry)
        warm[0, 4] = 200.0
        pv = ParameterVector.from_blocks(warm, Bounds.from_mapping(small.geometry), default_free_mask(small.geometry))
        with pytest.raises(ValueError, match="warm start"):
            fit(small, warm=pv)

    def test_cfl_violation(self, small):
        bounds = Bounds.from_mapping(small.geometry, {"v_free_kmh": (60, 150)})
        with pytest.raises(ValueError, match="CFL"):
            fit(small, bounds=bounds)

    def test_warm_start_fixed_entries_preserved(self, small):
        res = fit(small, iters=3)
        w = res.warm_start_used.blocks
        free = res.theta_star.full_mask
        np.testing.assert_array_equal(res.theta_star.blocks[~free], w[~free])

    def test_density_loss(self, small):
        res = fit(small, iters=5, loss=LossConfig(speed_weight=1.0, density_weight=10.0))
        assert res.final_loss <= res.loss_trace[0]

    def test_summary_fields(self, small):
        s = fit(small, iters=2).summary()
        for key in ("final_loss", "final_mape", "iterations", "termination_reason", "n_blocks", "wall_time_s"):
            assert key in s


def test_score_schedule_matches_zero_for_truth():
    b = preset("small", obs_noise=0.0)
    loss, m = score_schedule(b.truth, b.observed, b.bc, b.geometry)
    assert loss == 0.0 and m == 0.0
