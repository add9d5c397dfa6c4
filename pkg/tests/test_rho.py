"""Rolling-horizon calibration and horizon sweeps."""

import numpy as np
import pytest

from metanet_calib import rho as rho_mod
from metanet_calib.calibration import calibrate_static
from metanet_calib.core import simulate
from metanet_calib.objective import BLOWUP_PENALTY
from metanet_calib.params import Bounds, default_warm_start
from metanet_calib.rho import (
    RhoConfig,
    calibrate_rho,
    default_horizon_steps,
    expected_windows,
    horizon_sweep,
    minutes_to_steps,
)
from metanet_calib.solver import SolverConfig, SolverResult
from metanet_calib.synthetic import preset

FAST = SolverConfig(max_iterations=5)


@pytest.fixture(scope="module")
def small():
    return preset("small")


def run(bundle, hc, hp, **kw):
    g = bundle.geometry
    cfg = RhoConfig(hc, hp, inner_solver=kw.pop("inner", FAST), **kw)
    return calibrate_rho(bundle.observed, bundle.bc, g, Bounds.from_mapping(g), default_warm_start(g), cfg)


class TestHorizons:
    def test_default_pairs(self):
        pairs = default_horizon_steps(10.0)
        assert [c for c, _ in pairs] == [6, 12, 30, 60, 90, 120, 180]
        assert [p for _, p in pairs] == [12, 24, 60, 90, 120, 150, 240]

    def test_minutes_must_be_whole_steps(self):
        assert minutes_to_steps(15, 10.0) == 90
        with pytest.raises(ValueError):
            minutes_to_steps(0.25, 10.0)

    def test_control_shorter_than_prediction(self):
        with pytest.raises(ValueError):
            RhoConfig(20, 20)
        with pytest.raises(ValueError):
            RhoConfig(0, 5)
        with pytest.raises(ValueError):
            RhoConfig(5, 10, jump_penalty_weight=-1.0)


class TestCalibrateRho:
    def test_block_layout(self, small):
        res = run(small, 20, 30)
        assert res.schedule.n_blocks == expected_windows(90, 20) == 5
        assert res.schedule.breakpoints == (0, 20, 40, 60, 80)
        assert len(res.windows) == 5 and res.windows[-1]["t_pred"] == 90
        bounds = Bounds.from_mapping(small.geometry)
        assert np.all(res.schedule.blocks >= bounds.lower - 1e-12)
        assert np.all(res.schedule.blocks <= bounds.upper + 1e-12)

    def test_chaining_consistency(self, small):
        res = run(small, 30, 45)
        full = simulate(small.observed.initial_state, res.schedule, small.bc, small.geometry)
        state = small.observed.initial_state
        pieces = [full.speed[:1]]
        for k, t in enumerate(res.schedule.breakpoints):
            seg = simulate(state, res.schedule.blocks[k], small.bc.window(t, t + 30), small.geometry, start=t)
            pieces.append(seg.speed[1:])
            state = seg.state(seg.horizon)
        np.testing.assert_array_equal(np.vstack(pieces), full.speed)

    def test_huge_jump_weight_freezes_blocks(self, small):
        res = run(small, 30, 45, jump_penalty_weight=1e14)
        warm = default_warm_start(small.geometry)
        for blk in res.schedule.blocks:
            np.testing.assert_allclose(blk, warm, rtol=1e-6)

    def test_jump_cap_zero_freezes_blocks(self, small):
        res = run(small, 30, 45, jump_cap=0.0)
        for blk in res.schedule.blocks:
            np.testing.assert_array_equal(blk, default_warm_start(small.geometry))

    def test_nominal_anchor_ball(self, small):
        warm = default_warm_start(small.geometry)
        res = run(small, 30, 45, nominal_anchor=(warm, 0.01))
        bounds = Bounds.from_mapping(small.geometry)
        span = np.where(bounds.upper > bounds.lower, bounds.upper - bounds.lower, 1.0)
        for blk in res.schedule.blocks:
            assert np.linalg.norm((blk - warm) / span) <= 0.01 + 1e-9

    def test_reanchor_mode(self, small):
        res = run(small, 30, 45, reanchor=True)
        assert res.schedule.n_blocks == 3

    def test_single_window_matches_static(self, small):
        g = small.geometry
        inner = SolverConfig(max_iterations=10)
        res = run(small, 90, 91, inner=inner, jump_penalty_weight=0.0)
        st = calibrate_static(small.observed, small.bc, g, Bounds.from_mapping(g), default_warm_start(g), inner)
        assert res.final_loss == pytest.approx(st.final_loss, rel=1e-12)

    def test_failed_subproblem_retains_previous_block(self, small, monkeypatch):
        calls = {"n": 0}
        real = rho_mod.solve_window

        def flaky(obj, x0, cfg):
            calls["n"] += 1
            if calls["n"] == 2:
                return SolverResult(np.zeros_like(x0), BLOWUP_PENALTY, [BLOWUP_PENALTY], 0, "line-search-failure", 1)
            return real(obj, x0, cfg)
        monkeypatch.setattr(rho_mod, "solve_window", flaky)
        res = run(small, 30, 45)
        assert res.termination_reason == "completed-with-incidents"
        assert [i["window"] for i in res.incidents] == [1]
        np.testing.assert_array_equal(res.schedule.blocks[1], res.schedule.blocks[0])

    def test_reproducible(self, small):
        a, b = run(small, 30, 45), run(small, 30, 45)
        assert a.schedule.blocks.tobytes() == b.schedule.blocks.tobytes()


class TestHorizonSweep:
    def test_single_entry_equals_direct_call(self, small):
        g = small.geometry
        rows = horizon_sweep(small.observed, small.bc, g, Bounds.from_mapping(g), default_warm_start(g), [(30, 45)],
                             FAST)
        direct = run(small, 30, 45)
        assert rows[0].result.schedule.blocks.tobytes() == direct.schedule.blocks.tobytes()
        assert rows[0].as_dict()["n_blocks"] == 3

    def test_bad_pair_recorded_and_sweep_continues(self, small):
        g = small.geometry
        rows = horizon_sweep(small.observed, small.bc, g, Bounds.from_mapping(g), default_warm_start(g),
                             [(45, 30), (30, 45)], FAST)
        assert rows[0].error and rows[0].result is None
        assert rows[1].error is None and rows[1].result is not None
