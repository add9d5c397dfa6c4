"""Loss, MAPE and gradients."""

import numpy as np
import pytest

import oracles
from conftest import constant_bc, make_geom
from metanet_calib.core import BoundaryConditions, TrafficState, equilibrium_state, simulate
from metanet_calib.objective import (
    BLOWUP_PENALTY,
    LossConfig,
    ObservedField,
    WindowObjective,
    loss_gradient,
    mape,
    sse_loss,
)
from metanet_calib.params import Bounds, ParameterVector, default_free_mask, default_warm_start


def twin(n=3, horizon=5, seed=0, on=(), off=()):
    """Small scenario whose observations come from a random interior theta."""
    rng = np.random.default_rng(seed)
    geom = make_geom(n, on=on, off=off)
    bounds = Bounds.from_mapping(geom)
    mid = default_warm_start(geom)
    mask = default_free_mask(geom)
    frac = rng.uniform(0.3, 0.7, mid.shape)
    truth = np.where(mask, bounds.lower + frac * (bounds.upper - bounds.lower), 0.0)
    st = TrafficState.from_density_speed(rng.uniform(15, 35, n), rng.uniform(60, 100, n), geom)
    bc = _random_bc(rng, horizon)
    traj = simulate(st, truth, bc, geom)
    obs = ObservedField(traj.speed, st, traj.density, traj.flow)
    return geom, bounds, truth, obs, bc, traj


def _random_bc(rng, horizon):
    return BoundaryConditions(rng.uniform(3000, 5000, horizon), rng.uniform(70, 100, horizon),
                              rng.uniform(20, 40, horizon))


class TestMape:
    def test_identical(self):
        g = np.full((4, 3), 80.0)
        assert mape(g, g) == 0.0

    def test_ten_percent(self):
        assert mape(np.full((3, 3), 110.0), np.full((3, 3), 100.0)) == pytest.approx(10.0, rel=1e-14)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(0)
        sim, obs = rng.uniform(10, 120, (4, 4)), rng.uniform(10, 120, (4, 4))
        assert mape(sim, obs) == pytest.approx(oracles.mape(sim.tolist(), obs.tolist()), rel=1e-14)

    def test_floor_excludes_and_counts(self):
        obs = np.array([[100.0, 0.5], [0.2, 50.0]])
        sim = np.array([[110.0, 30.0], [40.0, 55.0]])
        value, excluded = mape(sim, obs, return_excluded=True)
        assert excluded == 2
        assert value == pytest.approx(10.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mape(np.ones((2, 2)), np.ones((3, 2)))


class TestSseLoss:
    def test_zero_at_generating_theta(self):
        geom, bounds, truth, obs, bc, _ = twin()
        theta = ParameterVector.from_blocks(truth, bounds)
        assert sse_loss(theta, obs, bc, geom) == 0.0

    def test_unit_offset_gives_t_times_s(self):
        geom = make_geom(4)
        p = default_warm_start(geom)
        st = equilibrium_state(20.0, p, geom)
        T = 7
        bc = constant_bc(T, st.flow[0], st.speed[0], 20.0)
        speed = np.tile(st.speed - 1.0, (T + 1, 1))
        obs = ObservedField(speed, st)
        theta = ParameterVector.from_blocks(p, Bounds.from_mapping(geom))
        assert sse_loss(theta, obs, bc, geom) == pytest.approx(T * 4, rel=1e-12)

    def test_summation_oracle(self):
        geom, bounds, truth, obs, bc, _ = twin(seed=4)
        other = truth.copy()
        other[:, 4] *= 0.9
        theta = ParameterVector.from_blocks(other, bounds)
        sim = simulate(obs.initial_state, other, bc, geom)
        expect = oracles.sse(sim.speed[1:].tolist(), obs.speed_obs[1:].tolist())
        assert sse_loss(theta, obs, bc, geom) == pytest.approx(expect, rel=1e-13)

    def test_weighted_components(self):
        geom, bounds, truth, obs, bc, _ = twin(seed=5)
        other = truth.copy()
        other[:, 5] *= 1.1
        theta = ParameterVector.from_blocks(other, bounds)
        sim = simulate(obs.initial_state, other, bc, geom)
        cfg = LossConfig(speed_weight=0.5, density_weight=2.0, flow_weight=1e-4)
        expect = (0.5 * np.sum((sim.speed[1:] - obs.speed_obs[1:]) ** 2)
                  + 2.0 * np.sum((sim.density[1:] - obs.density_obs[1:]) ** 2)
                  + 1e-4 * np.sum((sim.flow[1:] - obs.flow_obs[1:]) ** 2))
        assert sse_loss(theta, obs, bc, geom, loss=cfg) == pytest.approx(expect, rel=1e-12)

    def test_monotone_under_window_extension(self):
        geom, bounds, truth, obs, bc, _ = twin(horizon=12, seed=6)
        theta = ParameterVector.from_blocks(np.where(truth > 0, truth * 1.05, 0.0), bounds)
        values = [sse_loss(theta, obs, bc, geom, (0, t)) for t in range(13)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_blowup_penalty(self):
        geom, bounds, truth, obs, bc, _ = twin()
        theta = ParameterVector.from_blocks(truth, bounds)
        bad = bc.with_upstream_flow(np.where(np.arange(len(bc)) == 2, np.inf, bc.upstream_flow))
        value, info = sse_loss(theta, obs, bad, geom, return_info=True)
        assert info.blew_up and info.failure_time == 2
        assert value == BLOWUP_PENALTY * 3

    def test_window_start_state(self):
        geom, bounds, truth, obs, bc, traj = twin(horizon=10, seed=7)
        theta = ParameterVector.from_blocks(truth, bounds)
        assert sse_loss(theta, obs, bc, geom, (4, 10), start_state=traj.state(4)) == 0.0

    def test_density_weight_requires_grid(self):
        geom, bounds, truth, obs, bc, _ = twin()
        bare = ObservedField(obs.speed_obs, obs.initial_state)
        with pytest.raises(ValueError):
            sse_loss(ParameterVector.from_blocks(truth, bounds), bare, bc, geom, loss=LossConfig(density_weight=1.0))


class TestObservedField:
    def test_rejects_negative(self, geom3):
        st = equilibrium_state(20.0, default_warm_start(geom3), geom3)
        with pytest.raises(ValueError):
            ObservedField(-np.ones((3, 3)), st)

    def test_rejects_mismatched_grid(self, geom3):
        st = equilibrium_state(20.0, default_warm_start(geom3), geom3)
        with pytest.raises(ValueError):
            ObservedField(np.ones((3, 3)), st, density_obs=np.ones((2, 3)))


class TestGradient:
    def test_zero_at_minimum(self):
        geom, bounds, truth, obs, bc, _ = twin(horizon=20, seed=1, on=(2,), off=(1,))
        theta = ParameterVector.from_blocks(truth, bounds)
        for mode in ("exact", "central"):
            g = loss_gradient(theta, obs, bc, geom, mode=mode)
            assert np.max(np.abs(g)) <= 1e-4

    def test_richardson_consistency(self):
        geom, bounds, truth, obs, bc, _ = twin(horizon=20, seed=2)
        theta = ParameterVector.from_blocks(np.where(truth > 0, truth * 1.08, 0.0), bounds)
        g1 = loss_gradient(theta, obs, bc, geom, mode="central", h=1e-4)
        g2 = loss_gradient(theta, obs, bc, geom, mode="central", h=5e-5)
        np.testing.assert_allclose(g1, g2, rtol=1e-4, atol=1e-6 * np.max(np.abs(g1)))

    def test_forward_close_to_exact(self):
        geom, bounds, truth, obs, bc, _ = twin(horizon=20, seed=3)
        theta = ParameterVector.from_blocks(np.where(truth > 0, truth * 0.93, 0.0), bounds)
        ge = loss_gradient(theta, obs, bc, geom, mode="exact")
        gf = loss_gradient(theta, obs, bc, geom, mode="forward")
        np.testing.assert_allclose(gf, ge, rtol=1e-3, atol=1e-5 * np.max(np.abs(ge)))

    def test_exact_with_ramps_and_multiple_blocks(self):
        geom, bounds, truth, obs, bc, _ = twin(n=4, horizon=20, seed=8, on=(2,), off=(1,))
        blocks = np.array([truth * 1.05, truth * 0.97])
        theta = ParameterVector.from_blocks(np.clip(blocks, bounds.lower, bounds.upper), bounds)
        obj = WindowObjective(obs, bc, geom, theta, (0, 10))
        _, ge = obj.value_and_grad(theta.normalized())
        gc = obj.fd_gradient(theta.normalized(), mode="central", h=1e-6)
        np.testing.assert_allclose(ge, gc, rtol=1e-4, atol=1e-6 * np.max(np.abs(ge)))

    def test_exact_with_jump_penalty(self):
        geom, bounds, truth, obs, bc, _ = twin(horizon=10, seed=9)
        theta = ParameterVector.from_blocks(np.where(truth > 0, truth * 1.04, 0.0), bounds)
        anchor = np.full(len(theta), 0.5)
        obj = WindowObjective(obs, bc, geom, theta, anchor=anchor, jump_weight=3.0)
        v, ge = obj.value_and_grad(theta.normalized())
        assert v == pytest.approx(obj.value(theta.normalized()), rel=1e-14)
        gc = obj.fd_gradient(theta.normalized(), mode="central")
        np.testing.assert_allclose(ge, gc, rtol=1e-4, atol=1e-6 * np.max(np.abs(ge)))

    def test_unknown_mode(self):
        geom, bounds, truth, obs, bc, _ = twin()
        with pytest.raises(ValueError):
            loss_gradient(ParameterVector.from_blocks(truth, bounds), obs, bc, geom, mode="sideways")
