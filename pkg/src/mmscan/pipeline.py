"""Dataset-level orchestration: decode, reconstruct, map B-scans, fuse, evaluate.

Both modalities are expressed in the camera-1 frame {W} from the start: the
structured-light cloud by construction of the device models, the ultrasound
cloud through the tracked probe poses. Nothing here estimates or stores a
registration between them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import geomfit
from .errors import DegenerateInput, FrameMismatch
from .geometry import CameraModel, rotation_angle_deg
from .io import SOURCE_TAGS, camera_from_kv, read_kv, read_pgm, read_table
from .slcodec import PhaseMap, PointCloud, decode_gray, reconstruct, unwrap_absolute, unwrap_centerline, wrapped_phase
from .usfreehand import (ProbeCalibration, TrackedBScan, calibration_from_kv, cr_table, map_pixel_to_world,
                         segment_rings)


# -- structured light --------------------------------------------------------------

def load_sl_dataset(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    if not (d / "meta.txt").exists():
        raise DegenerateInput(f"{d} has no meta.txt")
    meta = read_kv(d / "meta.txt")
    images = {p.stem: read_pgm(p) for p in sorted((d / "cam1").glob("*.pgm"))}
    if not images:
        raise DegenerateInput(f"{d}/cam1 holds no captures")
    return images, meta


def decode_absolute(images: Mapping[str, np.ndarray], meta: Mapping, method: str = "gray") -> PhaseMap:
    """Absolute phase from a capture set, unwrapped by gray code or centre line."""
    steps = int(meta["steps"])
    ps = [images[f"ps_{i:02d}"] for i in range(steps)]
    wrapped = wrapped_phase(ps)
    if method == "gray":
        n = int(meta["bits"]) + (1 if meta.get("complementary", True) else 0)
        planes = [images[f"gray_{i:02d}"] for i in range(n)]
        index, imask = decode_gray(planes, images["white"], images["black"])
        return unwrap_absolute(wrapped, index, imask, complementary=bool(meta.get("complementary", True)))
    if method == "centerline":
        reference = np.mean(np.asarray(ps, float), axis=0)
        return unwrap_centerline(wrapped, images["centerline"], float(meta["pitch"]),
                                 float(meta["centerline_center"]), reference)
    raise DegenerateInput(f"unknown unwrapping method {method!r}")


def load_devices(paths) -> dict[str, CameraModel]:
    """Merge device models from one or more calibration files (later files win)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    devices = {}
    for p in paths:
        d = read_kv(p)
        for name in ("cam1", "cam2", "projector"):
            if f"{name}.fu" in d:
                devices[name] = camera_from_kv(d, name)
    return devices


def reconstruct_dataset(directory, devices: Mapping[str, CameraModel], method: str = "gray") -> PointCloud:
    images, meta = load_sl_dataset(directory)
    for name in ("cam1", "projector"):
        if name not in devices:
            raise DegenerateInput(f"calibration lacks {name}")
    phase = decode_absolute(images, meta, method)
    cloud = reconstruct(phase, devices["cam1"], devices["projector"], float(meta["pitch"]))
    if len(cloud) == 0:
        warnings.warn("no valid pixels: empty point cloud")
    return cloud


# -- ultrasound ----------------------------------------------------------------------

def map_sweep(scans: Sequence[TrackedBScan], cal: ProbeCalibration, **segment_kw) -> PointCloud:
    """Segment bright contours in every B-scan and map them to {W}."""
    pts = []
    for s in scans:
        if s.blank:
            continue
        for ring in segment_rings(s.image, **segment_kw):
            pts.append(map_pixel_to_world(cal, s.probe_pose, ring))
    P = np.concatenate(pts) if pts else np.zeros((0, 3))
    return PointCloud(P, np.full(len(P), SOURCE_TAGS["US"]))


def split_clusters(points, radius: float = 3.0, min_points: int = 30) -> list[np.ndarray]:
    """Connected components of a cloud under a neighbourhood radius, largest first."""
    from scipy.sparse.csgraph import connected_components
    P = np.asarray(points)
    if len(P) == 0:
        return []
    graph = cKDTree(P).sparse_distance_matrix(cKDTree(P), radius, output_type="coo_matrix")
    n, labels = connected_components(graph, directed=False)
    groups = [P[labels == i] for i in range(n)]
    groups = [g for g in groups if len(g) >= min_points]
    return sorted(groups, key=len, reverse=True)


# -- fusion ---------------------------------------------------------------------------

@dataclass
class FusionResult:
    sl_cloud: PointCloud
    us_cloud: PointCloud
    frame: str = "W"

    def merged(self) -> PointCloud:
        P = np.concatenate([self.sl_cloud.points, self.us_cloud.points])
        src = np.concatenate([np.full(len(self.sl_cloud), SOURCE_TAGS["SL"]),
                              np.full(len(self.us_cloud), SOURCE_TAGS["US"])]).astype(int)
        return PointCloud(P, src, self.frame)

    def summary(self) -> dict:
        out = {"frame": self.frame}
        for tag, c in (("sl", self.sl_cloud), ("us", self.us_cloud)):
            out[f"{tag}.count"] = len(c)
            if len(c):
                out[f"{tag}.bbox_min"] = c.points.min(axis=0)
                out[f"{tag}.bbox_max"] = c.points.max(axis=0)
        return out


def fuse(sl_cloud: PointCloud, us_cloud: PointCloud | None) -> FusionResult:
    """Pair the two clouds; both must already be in the world frame."""
    if us_cloud is None or len(us_cloud) == 0:
        warnings.warn("no ultrasound points: structured-light only result")
        us_cloud = PointCloud(np.zeros((0, 3)), np.zeros(0, int), sl_cloud.frame)
    if sl_cloud.frame != us_cloud.frame:
        raise FrameMismatch(f"clouds in different frames: {sl_cloud.frame} vs {us_cloud.frame}")
    return FusionResult(sl_cloud, us_cloud, sl_cloud.frame)


def containment(surface_points, inner_points, k: int = 8) -> dict:
    """Test whether points lie beneath a surface seen from camera 1.

    The surface is treated as a height field along the viewing direction
    (world z): each inner point is compared with the mean depth of its ``k``
    nearest surface points in (x, y), and must also fall inside the
    surface's (x, y) footprint.
    """
    S = np.asarray(surface_points)
    Q = np.asarray(inner_points)
    if len(S) == 0 or len(Q) == 0:
        raise DegenerateInput("containment needs both clouds")
    tree = cKDTree(S[:, :2])
    dist, idx = tree.query(Q[:, :2], k=k)
    z_surface = S[idx, 2].mean(axis=1)
    clearance = Q[:, 2] - z_surface
    spacing = np.median(cKDTree(S[:, :2]).query(S[:, :2], k=2)[0][:, 1])
    in_footprint = dist[:, 0] < 5 * spacing
    inside = (clearance > 0) & in_footprint
    return {"fraction_inside": float(inside.mean()), "min_clearance": float(clearance.min()),
            "all_inside": bool(inside.all())}


# -- evaluation -------------------------------------------------------------------------

def evaluate_plane(cloud: PointCloud) -> dict:
    m = geomfit.fit_plane(cloud)
    return {"points": len(cloud), "plane.rms": m.rms, "plane.normal": m.normal, "plane.offset": m.offset}


def evaluate_sphere(cloud: PointCloud, truth_radius: float | None = None) -> dict:
    m = geomfit.fit_sphere(cloud)
    out = {"points": len(cloud), "sphere.radius": m.radius, "sphere.center": m.center, "sphere.rms": m.rms}
    if truth_radius is not None:
        out["sphere.radius_error"] = m.radius - truth_radius
    return out


def evaluate_cylinders(fused: PointCloud, truth_gap: float | None = None) -> dict:
    if fused.sources is None:
        raise DegenerateInput("fused cloud lacks source tags")
    sl = fused.points[fused.sources == SOURCE_TAGS["SL"]]
    us = fused.points[fused.sources == SOURCE_TAGS["US"]]
    outer = geomfit.fit_cylinder(sl)
    inner = geomfit.fit_cylinder(us)
    gap = geomfit.cylinder_gap(inner, outer)
    out = {"outer.radius": outer.radius, "outer.rms": outer.rms, "inner.radius": inner.radius,
           "inner.rms": inner.rms, "gap": gap.gap, "axis_angle_deg": gap.axis_angle_deg,
           "axis_offset": gap.axis_offset}
    if truth_gap is not None:
        out["gap_error"] = gap.gap - truth_gap
    return out


def evaluate_containment(fused: PointCloud, expected_clusters: int | None = None) -> dict:
    sl = fused.points[fused.sources == SOURCE_TAGS["SL"]]
    us = fused.points[fused.sources == SOURCE_TAGS["US"]]
    out = containment(sl, us)
    clusters = split_clusters(us)
    out["us.clusters"] = len(clusters)
    for i, c in enumerate(clusters):
        try:
            s = geomfit.fit_sphere(c)
            out[f"cluster{i}.radius"] = s.radius
            out[f"cluster{i}.center"] = s.center
        except DegenerateInput:
            pass
    if expected_clusters is not None:
        out["clusters_match"] = len(clusters) == expected_clusters
    return out


def evaluate_probe(cals: Sequence[ProbeCalibration], truth: Mapping | None = None,
                   image_size=(321, 408)) -> dict:
    out = {"calibrations": len(cals)}
    if len(cals) >= 2:
        for name, (c1, c2) in cr_table(cals, image_size).items():
            out[f"cr1.{name}"] = c1
            out[f"cr2.{name}"] = c2
    if truth is not None:
        ref = calibration_from_kv(truth)
        for i, c in enumerate(cals):
            out[f"cal{i}.rotation_error_deg"] = rotation_angle_deg(c.t_T_I.rotation, ref.t_T_I.rotation)
            out[f"cal{i}.translation_error"] = float(np.linalg.norm(c.t_T_I.translation - ref.t_T_I.translation))
            out[f"cal{i}.sx_rel_error"] = c.sx / ref.sx - 1
            out[f"cal{i}.sy_rel_error"] = c.sy / ref.sy - 1
    return out


def load_truth(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "truth" / "truth.txt" if (p / "truth" / "truth.txt").exists() else p / "truth.txt"
    if not p.exists():
        raise DegenerateInput(f"missing truth file {p}")
    return read_kv(p)


def load_segmentation_truth(directory) -> np.ndarray:
    return read_table(Path(directory) / "truth" / "segmentation.txt")
