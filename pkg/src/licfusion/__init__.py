"""Filter-based LiDAR-inertial-camera odometry with online spatial and temporal calibration."""

from .estimator import Estimator, EstimatorConfig, EstimatorResult, run_estimator
from .metrics import Trajectory, align_trajectories, compute_metrics
from .sim import SimConfig, simulate

__all__ = [
    "Estimator", "EstimatorConfig", "EstimatorResult", "run_estimator",
    "Trajectory", "align_trajectories", "compute_metrics",
    "SimConfig", "simulate",
]
