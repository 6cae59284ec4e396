"""Synthetic ground truth: ray-cast scenes, fringe and marker renders, tracked B-scans."""

from .protocols import PROTOCOLS, ProtocolConfig, ProtocolRun, SweepFrame, SweepRecording, run_protocol
from .render import CrossWire, FringeCapture, MarkerViews, SurfacePhantom, render_fringe_views, render_marker_views, synth_bscan
from .scene import Cylinder, NoiseModel, Plane, Rig, Scene, Sphere, Superellipsoid, default_rig, look_at

__all__ = [
    "PROTOCOLS", "ProtocolConfig", "ProtocolRun", "SweepFrame", "SweepRecording", "run_protocol",
    "CrossWire", "FringeCapture", "MarkerViews", "SurfacePhantom", "render_fringe_views", "render_marker_views",
    "synth_bscan", "Cylinder", "NoiseModel", "Plane", "Rig", "Scene", "Sphere", "Superellipsoid", "default_rig",
    "look_at",
]
