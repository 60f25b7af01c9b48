"""RGB-D visual relocalization with feature-rendered virtual viewpoints."""

__version__ = "0.1.0"

from .geometry import Intrinsics, Pose, PoseError, pose_error  # noqa: F401
