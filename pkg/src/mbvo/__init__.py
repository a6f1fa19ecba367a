"""Multi-body stereo visual odometry.

Estimates camera ego-motion together with the trajectories of independently
moving rigid clusters from stereo features and 2D semantic boxes. Ships with
a synthetic scene simulator, an evaluation harness, and a command line tool.
"""

from mbvo.config import EngineConfig, load_config, save_config
from mbvo.geometry import Pose, StereoIntrinsics, StereoMeasurement
from mbvo.pipeline import Engine, FrameResult, run_stream

__all__ = [
    "Engine",
    "EngineConfig",
    "FrameResult",
    "Pose",
    "StereoIntrinsics",
    "StereoMeasurement",
    "load_config",
    "run_stream",
    "save_config",
]

__version__ = "0.1.0"
