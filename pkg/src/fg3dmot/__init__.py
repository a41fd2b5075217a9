"""3D multi-object tracking by max-mixture factor graph optimization."""

from .core import Detection, GaussianMixture, Mode, ObjectState, Track, TrackerParams, default_params
from .solver import SolverOptions, optimize, total_cost
from .tracker import Tracker, run_offline, run_online

__all__ = [
    "Detection",
    "GaussianMixture",
    "Mode",
    "ObjectState",
    "Track",
    "TrackerParams",
    "default_params",
    "SolverOptions",
    "optimize",
    "total_cost",
    "Tracker",
    "run_offline",
    "run_online",
]
__version__ = "0.1.0"
