"""Calibratable parameter vectors, bounds and default values."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import BETA, CORE_PARAMS, N_PARAMS, PARAM_NAMES, R, NetworkGeometry, ParameterSchedule

# Artifact defaults; plausible METANET ranges below the 144 km/h CFL limit of
# L = 0.4 km, delta = 10 s.
DEFAULT_BOUNDS: dict[str, tuple[float, float]] = {
    "tau_h": (1.0 / 360.0, 1.0 / 30.0),
    "eta": (10.0, 100.0),
    "kappa": (1.0, 50.0),
    "a": (1.0, 4.0),
    "v_free_kmh": (60.0, 140.0),
    "rho_cr": (15.0, 60.0),
    "beta": (0.0, 0.5),
    "r_vph": (0.0, 2000.0),
}

DEFAULT_WARM_START: dict[str, float] = {
    "tau_h": 18.0 / 3600.0,
    "eta": 60.0,
    "kappa": 40.0,
    "a": 1.867,
    "v_free_kmh": 102.0,
    "rho_cr": 33.5,
    "beta": 0.1,
    "r_vph": 500.0,
}


def default_warm_start(geom: NetworkGeometry, values: Mapping[str, float] | None = None) -> np.ndarray:
    """``(S, 8)`` warm start with ramp entries zeroed where no ramp exists."""
    vals = dict(DEFAULT_WARM_START)
    if values:
        vals.update(values)
    arr = np.tile([vals[n] for n in PARAM_NAMES], (geom.num_segments, 1)).astype(float)
    arr[~geom.offramp_mask, BETA] = 0.0
    arr[~geom.onramp_mask, R] = 0.0
    return arr


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray  # (S, 8)
    upper: np.ndarray

    @classmethod
    def from_mapping(cls, geom: NetworkGeometry, bounds: Mapping[str, Sequence[float]] | None = None) -> "Bounds":
        b = dict(DEFAULT_BOUNDS)
        if bounds:
            b.update({k: tuple(v) for k, v in bounds.items()})
        unknown = set(b) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown parameter names in bounds: {sorted(unknown)}")
        lo = np.tile([b[n][0] for n in PARAM_NAMES], (geom.num_segments, 1)).astype(float)
        hi = np.tile([b[n][1] for n in PARAM_NAMES], (geom.num_segments, 1)).astype(float)
        if np.any(hi < lo):
            raise ValueError("upper bound below lower bound")
        return cls(lo, hi)

    def v_free_max(self) -> float:
        return float(self.upper[:, PARAM_NAMES.index("v_free_kmh")].max())

    def contains(self, params, mask=None) -> bool:
        params = np.asarray(params)
        ok = (params >= self.lower) & (params <= self.upper)
        if mask is not None:
            ok = ok | ~np.asarray(mask)
        return bool(np.all(ok))


def default_free_mask(geom: NetworkGeometry, names: Sequence[str] = PARAM_NAMES) -> np.ndarray:
    """Entries subject to calibration: core parameters everywhere, ramps where they exist."""
    mask = np.zeros((geom.num_segments, N_PARAMS), dtype=bool)
    for n in names:
        j = PARAM_NAMES.index(n)
        if n == "beta":
            mask[:, j] = geom.offramp_mask
        elif n == "r_vph":
            mask[:, j] = geom.onramp_mask
        else:
            mask[:, j] = True
    return mask


@dataclass(frozen=True)
class ParameterVector:
    """Flattened free entries of ``blocks`` with their bounds.

    ``blocks`` has shape ``(n_blocks, S, 8)``; entries outside ``mask`` are
    held fixed at their value in ``blocks``. The solver-facing view is the
    affine map of every free entry onto [0, 1] by its bounds.
    """

    blocks: np.ndarray
    mask: np.ndarray  # (S, 8), applied to every block
    lower: np.ndarray  # flat, physical units
    upper: np.ndarray

    @classmethod
    def from_blocks(cls, blocks, bounds: Bounds, mask=None) -> "ParameterVector":
        blocks = np.array(blocks, dtype=float)
        if blocks.ndim == 2:
            blocks = blocks[None]
        mask = np.asarray(mask if mask is not None else np.ones(blocks.shape[1:], bool), dtype=bool)
        # a degenerate interval cannot be normalised; treat it as fixed
        mask = mask & (bounds.upper > bounds.lower)
        n = blocks.shape[0]
        lo = np.broadcast_to(bounds.lower, blocks.shape)[np.broadcast_to(mask, blocks.shape)]
        hi = np.broadcast_to(bounds.upper, blocks.shape)[np.broadcast_to(mask, blocks.shape)]
        assert lo.size == n * int(mask.sum())
        return cls(blocks, mask, lo.copy(), hi.copy())

    @property
    def full_mask(self) -> np.ndarray:
        return np.broadcast_to(self.mask, self.blocks.shape)

    @property
    def values(self) -> np.ndarray:
        return self.blocks[self.full_mask]

    @property
    def scale(self) -> np.ndarray:
        return self.upper - self.lower

    def __len__(self):
        return int(self.lower.size)

    def normalized(self) -> np.ndarray:
        return (self.values - self.lower) / self.scale

    def with_values(self, values) -> "ParameterVector":
        blocks = self.blocks.copy()
        blocks[self.full_mask] = np.asarray(values, dtype=float)
        return replace(self, blocks=blocks)

    def with_normalized(self, xn) -> "ParameterVector":
        return self.with_values(self.lower + self.scale * np.asarray(xn, dtype=float))

    def blocks_from_normalized(self, xn) -> np.ndarray:
        blocks = self.blocks.copy()
        blocks[self.full_mask] = self.lower + self.scale * np.asarray(xn, dtype=float)
        return blocks

    def scatter_gradient(self, g_blocks) -> np.ndarray:
        """Map a gradient over ``blocks`` to normalised coordinates."""
        return np.asarray(g_blocks)[self.full_mask] * self.scale

    def in_bounds(self) -> bool:
        v = self.values
        return bool(np.all((v >= self.lower) & (v <= self.upper)))

    def labels(self) -> list[tuple[int, int, str]]:
        idx = np.argwhere(self.full_mask)
        return [(int(b), int(s), PARAM_NAMES[int(j)]) for b, s, j in idx]

    def to_schedule(self, breakpoints=(0,)) -> ParameterSchedule:
        return ParameterSchedule(tuple(breakpoints), self.blocks.copy())


def normalized_distance_sq(a: ParameterVector, b_norm: np.ndarray) -> float:
    d = a.normalized() - b_norm
    return float(d @ d)


__all__ = [
    "Bounds",
    "CORE_PARAMS",
    "DEFAULT_BOUNDS",
    "DEFAULT_WARM_START",
    "ParameterVector",
    "default_free_mask",
    "default_warm_start",
]
