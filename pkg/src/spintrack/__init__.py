"""Asynchronous multi-camera ball state estimation.

A factor-graph estimator for the 3D position, velocity and per-bounce
spin of a spinning, bouncing ball observed by unsynchronized cameras,
with landing-point prediction, EKF baselines, and a synthetic
evaluation harness.
"""

__version__ = "0.1.0"

from .baselines import BaselineTracker, KalmanState, baseline_landing, ekf_predict, ekf_update
from .core import (
    CameraModel,
    Detection,
    NoiseSpec,
    PhysicsParams,
    SpinPrior,
    load_calibration,
    load_detections,
    load_spin_prior,
    save_calibration,
    save_detections,
    save_spin_prior,
)
from .estimator import EstimateSnapshot, Estimator, EstimatorConfig, SpinLabelResult, label_spin
from .experiment import run_experiment
from .graph import FactorGraph
from .physics import (
    BounceEvent,
    FlightState,
    LandingPrediction,
    Trajectory,
    bounce_map,
    integrate,
    predict_landings,
)
from .solver import IncrementalSolver, SolverConfig, Values, solve_batch

__all__ = [
    "BaselineTracker",
    "BounceEvent",
    "CameraModel",
    "Detection",
    "EstimateSnapshot",
    "Estimator",
    "EstimatorConfig",
    "FactorGraph",
    "FlightState",
    "IncrementalSolver",
    "KalmanState",
    "LandingPrediction",
    "NoiseSpec",
    "PhysicsParams",
    "SolverConfig",
    "SpinLabelResult",
    "SpinPrior",
    "Trajectory",
    "Values",
    "baseline_landing",
    "bounce_map",
    "ekf_predict",
    "ekf_update",
    "integrate",
    "label_spin",
    "load_calibration",
    "load_detections",
    "load_spin_prior",
    "predict_landings",
    "run_experiment",
    "save_calibration",
    "save_detections",
    "save_spin_prior",
    "solve_batch",
]
