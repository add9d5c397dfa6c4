"""Synthetic twin generation."""

import numpy as np
import pytest

from metanet_calib.calibration import calibrate_static
from metanet_calib.core import ParameterSchedule, simulate
from metanet_calib.params import Bounds, default_warm_start
from metanet_calib.solver import SolverConfig
from metanet_calib.synthetic import (
    PRESETS,
    BoundaryProfile,
    _geom,
    generate_synthetic,
    preset,
    shifted_schedule,
)


class TestGenerate:
    def test_noise_free_equals_truth(self):
        b = preset("small", obs_noise=0.0)
        traj = simulate(b.observed.initial_state, b.truth, b.bc, b.geometry)
        np.testing.assert_array_equal(b.observed.speed_obs, traj.speed)
        np.testing.assert_array_equal(b.truth_speed, traj.speed)

    def test_same_seed_identical(self):
        a, b = preset("small", seed=4, obs_noise=0.05), preset("small", seed=4, obs_noise=0.05)
        assert a.observed.speed_obs.tobytes() == b.observed.speed_obs.tobytes()
        c = preset("small", seed=5, obs_noise=0.05)
        assert a.observed.speed_obs.tobytes() != c.observed.speed_obs.tobytes()

    def test_noise_is_multiplicative(self):
        b = preset("small", seed=1, obs_noise=0.05)
        rel = b.observed.speed_obs / b.truth_speed - 1.0
        assert abs(rel.mean()) < 0.01 and rel.std() == pytest.approx(0.05, rel=0.15)

    def test_truth_warm_start_gives_zero_loss(self):
        b = preset("small", obs_noise=0.0)
        g = b.geometry
        res = calibrate_static(b.observed, b.bc, g, Bounds.from_mapping(g), b.truth.blocks[0],
                               SolverConfig(max_iterations=5))
        assert res.loss_trace[0] == 0.0 and res.iterations == 0

    def test_unstable_truth_rejected(self):
        g = _geom(3)
        p = default_warm_start(g)
        p[:, 0] = 1e-9  # relaxation time far below the step
        with pytest.raises(ValueError, match="unstable"):
            generate_synthetic(g, ParameterSchedule.constant(p), BoundaryProfile(), 30)

    def test_shifted_schedule(self):
        g = _geom(2)
        s = shifted_schedule(default_warm_start(g), 100, [(50, {"v_free_kmh": 80.0})])
        assert s.breakpoints == (0, 50) and s.blocks[1, 0, 4] == 80.0 and s.blocks[0, 0, 4] == 102.0
        with pytest.raises(ValueError):
            shifted_schedule(default_warm_start(g), 100, [(100, {"a": 2.0})])

    @pytest.mark.parametrize("shape", ["constant", "ramp", "sinusoidal"])
    def test_inflow_shapes_in_range(self, shape):
        prof = BoundaryProfile(inflow_shape=shape, inflow_low=1000.0, inflow_high=6000.0, inflow_period_steps=40)
        q = prof.inflow(80)
        assert q.min() >= 1000.0 and q.max() <= 6000.0
        if shape == "ramp":
            assert q[0] == 1000.0 and q[-1] == 6000.0

    def test_unknown_shape(self):
        with pytest.raises(ValueError):
            BoundaryProfile(inflow_shape="square")

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_build(self, name):
        b = preset(name)
        assert b.observed.horizon == PRESETS[name]["horizon"]
        assert b.metadata["truth_clamp_events"] == 0

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            preset("nope")
