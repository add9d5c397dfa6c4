"""METANET simulation with static, rolling-horizon and genetic calibration."""

__version__ = "0.1.0"

from .calibration import CalibrationResult, calibrate_static, score_schedule
from .core import (
    PARAM_NAMES,
    BoundaryConditions,
    ModelOptions,
    NetworkGeometry,
    NumericalError,
    ParameterSchedule,
    SegmentParameters,
    TrafficState,
    Trajectory,
    cfl_check,
    equilibrium_speed,
    simulate,
    step,
)
from .evaluation import NoiseSpec, fd_points, landscape_sweep, robustness_sweep, smooth_boundaries
from .ga import GaConfig, calibrate_ga
from .objective import LossConfig, ObservedField, loss_gradient, mape, sse_loss
from .params import Bounds, ParameterVector, default_warm_start
from .rho import RhoConfig, calibrate_rho, horizon_sweep
from .solver import SolverConfig

__all__ = [
    "PARAM_NAMES", "BoundaryConditions", "Bounds", "CalibrationResult", "GaConfig", "LossConfig", "ModelOptions",
    "NetworkGeometry", "NoiseSpec", "NumericalError", "ObservedField", "ParameterSchedule", "ParameterVector",
    "RhoConfig", "SegmentParameters", "SolverConfig", "TrafficState", "Trajectory", "calibrate_ga", "calibrate_rho",
    "calibrate_static", "cfl_check", "default_warm_start", "equilibrium_speed", "fd_points", "horizon_sweep",
    "landscape_sweep", "loss_gradient", "mape", "robustness_sweep", "score_schedule", "simulate",
    "smooth_boundaries", "sse_loss", "step",
]
