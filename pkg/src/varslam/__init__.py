"""Object-level SLAM: probabilistic association of object detections to
landmarks, joint pose/feature estimation by EM, synthetic worlds and
trajectory metrics."""

from .association import Detection, Landmark, WeightMatrix, em_weights_exact, em_weights_factored
from .geometry import EulerAngle, Se3Pose
from .metrics import ate, rpe
from .optimizer import PoseFeatureGraph, Solution, SolverConfig, run_em
from .simulator import Dataset, NoiseConfig, TrajectoryConfig, WorldConfig, make_dataset

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Detection",
    "EulerAngle",
    "Landmark",
    "NoiseConfig",
    "PoseFeatureGraph",
    "Se3Pose",
    "Solution",
    "SolverConfig",
    "TrajectoryConfig",
    "WeightMatrix",
    "WorldConfig",
    "ate",
    "em_weights_exact",
    "em_weights_factored",
    "make_dataset",
    "rpe",
    "run_em",
]
