"""Parameter bounds, normalisation and layout."""

import numpy as np
import pytest

from conftest import make_geom
from metanet_calib.core import PARAM_NAMES
from metanet_calib.params import (
    DEFAULT_BOUNDS,
    Bounds,
    ParameterVector,
    default_free_mask,
    default_warm_start,
)


@pytest.fixture
def ramp_geom():
    return make_geom(4, on=(2,), off=(1,))


class TestBounds:
    def test_defaults(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom)
        assert b.v_free_max() == 140.0
        assert b.lower[0, 0] == pytest.approx(1 / 360) and b.upper[0, 0] == pytest.approx(1 / 30)

    def test_override(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom, {"v_free_kmh": (70, 120)})
        assert b.v_free_max() == 120.0

    def test_unknown_name(self, ramp_geom):
        with pytest.raises(ValueError):
            Bounds.from_mapping(ramp_geom, {"speed_limit": (0, 1)})

    def test_warm_start_within_defaults(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom)
        assert b.contains(default_warm_start(ramp_geom), default_free_mask(ramp_geom))


class TestFreeMask:
    def test_ramp_entries(self, ramp_geom):
        m = default_free_mask(ramp_geom)
        beta, r = PARAM_NAMES.index("beta"), PARAM_NAMES.index("r_vph")
        assert m[1, beta] and not m[0, beta] and m[2, r] and not m[1, r]
        assert m[:, :6].all()


class TestParameterVector:
    def test_round_trip(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom)
        pv = ParameterVector.from_blocks(default_warm_start(ramp_geom), b, default_free_mask(ramp_geom))
        back = pv.with_values(pv.values)
        np.testing.assert_array_equal(back.blocks, pv.blocks)
        np.testing.assert_allclose(pv.with_normalized(pv.normalized()).blocks, pv.blocks, rtol=1e-15)
        assert len(pv) == 4 * 6 + 2

    def test_normalised_in_unit_box(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom)
        pv = ParameterVector.from_blocks(default_warm_start(ramp_geom), b, default_free_mask(ramp_geom))
        x = pv.normalized()
        assert np.all((x >= 0) & (x <= 1))

    def test_fixed_entries_untouched(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom)
        pv = ParameterVector.from_blocks(default_warm_start(ramp_geom), b, default_free_mask(ramp_geom))
        moved = pv.with_normalized(np.ones(len(pv)))
        beta = PARAM_NAMES.index("beta")
        assert moved.blocks[0, 0, beta] == 0.0 and moved.blocks[0, 1, beta] == DEFAULT_BOUNDS["beta"][1]

    def test_multi_block_schedule(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom)
        w = default_warm_start(ramp_geom)
        pv = ParameterVector.from_blocks(np.array([w, w]), b, default_free_mask(ramp_geom))
        assert len(pv) == 2 * 26
        sched = pv.to_schedule((0, 30))
        assert sched.n_blocks == 2 and sched.breakpoints == (0, 30)

    def test_labels(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom)
        pv = ParameterVector.from_blocks(default_warm_start(ramp_geom), b, default_free_mask(ramp_geom))
        labels = pv.labels()
        assert len(labels) == len(pv) and labels[0] == (0, 0, "tau_h")

    def test_default_mask_frees_everything(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom)
        assert len(ParameterVector.from_blocks(default_warm_start(ramp_geom), b)) == 4 * 8

    def test_degenerate_interval_is_fixed(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom, {"a": (2.0, 2.0)})
        pv = ParameterVector.from_blocks(default_warm_start(ramp_geom, {"a": 2.0}), b, default_free_mask(ramp_geom))
        assert len(pv) == 4 * 5 + 2

    def test_out_of_bounds_detected(self, ramp_geom):
        b = Bounds.from_mapping(ramp_geom)
        w = default_warm_start(ramp_geom)
        w[0, 4] = 200.0
        assert not ParameterVector.from_blocks(w, b).in_bounds()
