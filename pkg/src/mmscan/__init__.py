"""Structured-light and tracked freehand-ultrasound imaging in one camera frame."""

from .errors import (AmbiguousTarget, DegenerateInput, DegenerateRays, FrameMismatch, IllConditioned, MMScanError,
                     NonConvergence, PointBehindCamera, ScaleMismatch, TargetNotVisible, UnderconstrainedMotion)
from .geometry import CameraModel, RigidTransform, compose, invert, project, reprojection_rms, triangulate

__version__ = "0.1.0"

__all__ = [
    "AmbiguousTarget", "DegenerateInput", "DegenerateRays", "FrameMismatch", "IllConditioned", "MMScanError",
    "NonConvergence", "PointBehindCamera", "ScaleMismatch", "TargetNotVisible", "UnderconstrainedMotion",
    "CameraModel", "RigidTransform", "compose", "invert", "project", "reprojection_rms", "triangulate",
]
