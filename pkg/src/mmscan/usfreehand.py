"""Freehand ultrasound: cross-wire probe calibration, B-scan mapping, reproducibility.

Frames: {I} image (pixels scaled by ``sx``, ``sy`` into mm, z = 0 on the
image plane), {T} tracked target on the probe, {W} world (camera 1), {F}
phantom with its origin on the wire crossing. Only the crossing's world
position ``p_F`` is observable, so {F} is modelled as a pure translation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateInput, NonConvergence, UnderconstrainedMotion
from .geometry import RigidTransform, matrix_to_rotvec, rotation_angle_deg, rotvec_to_matrix, skew
from .lm import levenberg_marquardt

DEFAULT_IMAGE_SIZE = (321, 408)
DEFAULT_DEPTH_MM = 50.0


@dataclass(frozen=True)
class ProbeCalibration:
    t_T_I: RigidTransform
    sx: float
    sy: float

    def __post_init__(self):
        if not (self.sx > 0 and self.sy > 0):
            raise DegenerateInput("scales must be positive")

    def image_point(self, uv) -> np.ndarray:
        """Pixel(s) to millimetres in the image frame (z = 0)."""
        uv = np.atleast_2d(np.asarray(uv, float))
        return np.column_stack([self.sx * uv[:, 0], self.sy * uv[:, 1], np.zeros(len(uv))])

    def to_probe(self, uv) -> np.ndarray:
        return self.t_T_I.apply(self.image_point(uv))


@dataclass
class TrackedBScan:
    image: np.ndarray
    probe_pose: RigidTransform      # target {T} -> world {W}
    timestamp: float = 0.0
    blank: bool = False


@dataclass
class PhantomModel:
    cross_point_world: np.ndarray


@dataclass
class CalibrationDataset:
    poses: list[RigidTransform]
    points: np.ndarray              # (N, 2) segmented (u, v)
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    depth_mm: float = DEFAULT_DEPTH_MM

    def __post_init__(self):
        self.points = np.asarray(self.points, float).reshape(-1, 2)
        if len(self.poses) != len(self.points):
            raise DegenerateInput("one segmented point per pose is required")

    def __len__(self):
        return len(self.poses)

    @classmethod
    def from_scans(cls, scans: Sequence[TrackedBScan], depth_mm: float = DEFAULT_DEPTH_MM) -> "CalibrationDataset":
        poses, pts = [], []
        for s in scans:
            if s.blank:
                continue
            try:
                pts.append(segment_cross_point(s.image))
            except DegenerateInput:
                continue
            poses.append(s.probe_pose)
        h, w = scans[0].image.shape
        return cls(poses, np.array(pts), (w, h), depth_mm)


@dataclass
class CalibrationReport:
    calibration: ProbeCalibration
    phantom: PhantomModel
    rms: float                      # sqrt(mean ||residual||^2) over frames (mm)
    residuals: np.ndarray           # per-frame residual vectors (N, 3)
    iterations: int
    cost_history: list[float] = field(default_factory=list)


def segment_cross_point(image, threshold: float = 0.5, smooth: float = 1.5) -> np.ndarray:
    """Intensity-weighted centroid of the brightest region above ``threshold * max``.

    The image is first smoothed with a Gaussian of ``smooth`` px to tame
    speckle. Weights are the intensities in excess of the threshold.
    """
    img = np.asarray(image, dtype=float)
    if smooth > 0:
        img = ndimage.gaussian_filter(img, smooth)
    peak = img.max()
    if peak <= 0:
        raise DegenerateInput("no echo above threshold")
    labels, n = ndimage.label(img >= threshold * peak)
    lab = labels.flat[np.argmax(img)]
    rr, cc = np.nonzero(labels == lab)
    # weights measured from the threshold fall to zero at the region edge,
    # so the pixel grid cutting the spot unevenly does not pull the centroid
    wgt = img[rr, cc] - threshold * peak
    if len(rr) < 2 or wgt.sum() <= 0:
        raise DegenerateInput("no echo above threshold")
    return np.array([np.sum(wgt * cc) / wgt.sum(), np.sum(wgt * rr) / wgt.sum()])


def segment_rings(image, threshold: float = 0.5, n_rays: int = 120, min_area: int = 20,
                  smooth: float = 1.0) -> list[np.ndarray]:
    """Sub-pixel ridge points of closed bright contours (one array per contour).

    Rays are cast from each component's centroid; the ridge position along a
    ray is the parabolic peak of the smoothed profile.
    """
    img = ndimage.gaussian_filter(np.asarray(image, dtype=float), smooth)
    img = img - np.median(img)
    peak = img.max()
    if peak <= 0:
        return []
    labels, n = ndimage.label(img >= threshold * peak, structure=np.ones((3, 3)))
    out = []
    ang = np.linspace(0, 2 * np.pi, n_rays, endpoint=False)
    for i in range(1, n + 1):
        rr, cc = np.nonzero(labels == i)
        if len(rr) < min_area:
            continue
        c = np.array([cc.mean(), rr.mean()])
        rmax = np.sqrt(np.max((cc - c[0]) ** 2 + (rr - c[1]) ** 2)) + 4
        radii = np.arange(0, rmax, 0.25)
        us = c[0] + np.cos(ang)[:, None] * radii
        vs = c[1] + np.sin(ang)[:, None] * radii
        prof = ndimage.map_coordinates(img, [vs.ravel(), us.ravel()], order=1, mode="constant",
                                       cval=0.0).reshape(us.shape)
        pts = []
        for k in range(n_rays):
            j = int(np.argmax(prof[k]))
            if prof[k, j] < threshold * peak or j == 0 or j == len(radii) - 1:
                continue
            a, b, cc_ = prof[k, j - 1], prof[k, j], prof[k, j + 1]
            den = a - 2 * b + cc_
            off = 0.5 * (a - cc_) / den if den < 0 else 0.0
            r = radii[j] + off * (radii[1] - radii[0])
            pts.append([c[0] + r * np.cos(ang[k]), c[1] + r * np.sin(ang[k])])
        if len(pts) >= 6:
            out.append(np.array(pts))
    return out


def map_pixel_to_world(cal: ProbeCalibration, probe_pose: RigidTransform, uv) -> np.ndarray:
    """``X_W = W_T_T @ T_T_I @ (sx*u, sy*v, 0)``; returns (3,) for one pixel, (N, 3) for many."""
    uv_arr = np.asarray(uv, float)
    X = probe_pose.apply(cal.to_probe(uv_arr))
    return X[0] if uv_arr.ndim == 1 else X


def canonical_rotations() -> list[np.ndarray]:
    """The 24 proper rotations that permute coordinate axes (with signs)."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            R = np.zeros((3, 3))
            for i, (j, s) in enumerate(zip(perm, signs)):
                R[i, j] = s
            if np.linalg.det(R) > 0:
                out.append(R)
    return out


def orientation_spread_deg(poses: Sequence[RigidTransform]) -> float:
    """Largest pairwise rotation angle among the poses."""
    Rs = [p.rotation for p in poses]
    best = 0.0
    for i in range(len(Rs)):
        for j in range(i + 1, len(Rs)):
            best = max(best, rotation_angle_deg(Rs[i], Rs[j]))
    return best


def _unpack(x):
    return rotvec_to_matrix(x[0:3]), x[3:6], x[6], x[7], x[8:11]


def _retract(x, dx):
    out = x + dx
    out[0:3] = matrix_to_rotvec(rotvec_to_matrix(dx[0:3]) @ rotvec_to_matrix(x[0:3]))
    return out


def calibration_residuals(x, Rw, tw, uv) -> np.ndarray:
    R, t, sx, sy, p = _unpack(x)
    q = np.column_stack([sx * uv[:, 0], sy * uv[:, 1], np.zeros(len(uv))])
    y = q @ R.T + t
    return (np.einsum("nij,nj->ni", Rw, y) + tw - p).ravel()


def _calibration_jacobian(x, Rw, tw, uv) -> np.ndarray:
    R, t, sx, sy, p = _unpack(x)
    n = len(uv)
    q = np.column_stack([sx * uv[:, 0], sy * uv[:, 1], np.zeros(n)])
    Rq = q @ R.T
    J = np.zeros((n, 3, 11))
    J[:, :, 0:3] = -np.einsum("nij,njk->nik", Rw, np.array([skew(v) for v in Rq]))
    J[:, :, 3:6] = Rw
    J[:, :, 6] = np.einsum("nij,j->ni", Rw, R[:, 0]) * uv[:, 0:1]
    J[:, :, 7] = np.einsum("nij,j->ni", Rw, R[:, 1]) * uv[:, 1:2]
    J[:, :, 8:11] = -np.eye(3)
    return J.reshape(3 * n, 11)


def solve_calibration(data: CalibrationDataset, min_spread_deg: float = 30.0,
                      max_iter: int = 500) -> CalibrationReport:
    """Estimate ``T_T_I``, ``sx``, ``sy`` and the wire crossing ``p_F``.

    Initial guess: nominal scales (depth / image height); for each of the 24
    axis-aligned rotations the remaining unknowns ``t`` and ``p_F`` enter
    linearly and are solved in closed form; the cheapest rotation seeds LM.
    """
    n = len(data)
    if n < 6:
        raise UnderconstrainedMotion(f"need at least 6 observations, got {n}")
    spread = orientation_spread_deg(data.poses)
    if spread <= min_spread_deg:
        raise UnderconstrainedMotion(f"orientation spread {spread:.1f} deg <= {min_spread_deg} deg")
    Rw = np.array([p.rotation for p in data.poses])
    tw = np.array([p.translation for p in data.poses])
    uv = data.points
    s0 = data.depth_mm / data.image_size[1]

    best = None
    A = np.concatenate([Rw, np.broadcast_to(-np.eye(3), (n, 3, 3))], axis=2).reshape(3 * n, 6)
    for R in canonical_rotations():
        q = np.column_stack([s0 * uv[:, 0], s0 * uv[:, 1], np.zeros(n)])
        b = -(np.einsum("nij,nj->ni", Rw, q @ R.T) + tw).ravel()
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        cost = float(np.sum((A @ sol - b) ** 2))
        if best is None or cost < best[0]:
            best = (cost, R, sol)
    _, R0, sol = best
    x0 = np.concatenate([matrix_to_rotvec(R0), sol[:3], [s0, s0], sol[3:]])

    res = levenberg_marquardt(lambda x: calibration_residuals(x, Rw, tw, uv),
                              lambda x: _calibration_jacobian(x, Rw, tw, uv),
                              x0, retract=_retract, max_iter=max_iter, ftol=1e-12, xtol=1e-10)
    if not res.converged:
        raise NonConvergence(f"probe calibration did not converge ({res.reason})")
    R, t, sx, sy, p = _unpack(res.x)
    # the image z-axis is unobserved: a negative scale is a mirrored but equivalent solution
    if sx < 0:
        R, sx = R @ np.diag([-1.0, 1.0, -1.0]), -sx
    if sy < 0:
        R, sy = R @ np.diag([1.0, -1.0, -1.0]), -sy
    r = calibration_residuals(res.x, Rw, tw, uv).reshape(n, 3)
    cal = ProbeCalibration(RigidTransform(R, t), float(sx), float(sy))
    return CalibrationReport(cal, PhantomModel(np.array(p)), float(np.sqrt(np.mean(np.sum(r ** 2, axis=1)))),
                             r, res.iterations, res.cost_history)


def pooled_rms(reports: Sequence[CalibrationReport]) -> float:
    """RMS over the residuals of several calibrations taken together."""
    r = np.concatenate([rep.residuals for rep in reports])
    return float(np.sqrt(np.mean(np.sum(r ** 2, axis=1))))


def trial_pixels(image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE) -> dict[str, np.ndarray]:
    """Image centre and the four corners."""
    w, h = image_size
    um, vm = w - 1, h - 1
    return {
        "center": np.array([um / 2, vm / 2]),
        "top_left": np.array([0.0, 0.0]),
        "top_right": np.array([um, 0.0]),
        "bottom_left": np.array([0.0, vm]),
        "bottom_right": np.array([um, vm]),
    }


def cr1(cal_a: ProbeCalibration, cal_b: ProbeCalibration, pixel) -> float:
    """Distance between one pixel's probe-frame positions under two calibrations."""
    return float(np.linalg.norm(cal_a.to_probe(pixel)[0] - cal_b.to_probe(pixel)[0]))


def cr1_mean(cals: Sequence[ProbeCalibration], pixel) -> float:
    """Mean of :func:`cr1` over all pairs of calibrations."""
    if len(cals) < 2:
        raise DegenerateInput("CR needs at least two calibrations")
    return float(np.mean([cr1(a, b, pixel) for a, b in itertools.combinations(cals, 2)]))


def cr2(cals: Sequence[ProbeCalibration], pixel) -> float:
    """Mean distance of one pixel's probe-frame positions to their centroid."""
    if len(cals) < 2:
        raise DegenerateInput("CR needs at least two calibrations")
    X = np.array([c.to_probe(pixel)[0] for c in cals])
    # offsets from the first point keep identical calibrations exactly at zero
    D = X - X[0]
    return float(np.mean(np.linalg.norm(D - D.mean(axis=0), axis=1)))


def cr_table(cals: Sequence[ProbeCalibration], image_size=DEFAULT_IMAGE_SIZE) -> dict[str, tuple[float, float]]:
    """``{trial point: (CR1, CR2)}`` plus ``mean`` over the five trial points."""
    table = {name: (cr1_mean(cals, px), cr2(cals, px)) for name, px in trial_pixels(image_size).items()}
    vals = np.array(list(table.values()))
    table["mean"] = (float(vals[:, 0].mean()), float(vals[:, 1].mean()))
    return table


# -- persistence -------------------------------------------------------------

def calibration_to_kv(report_or_cal, phantom: PhantomModel | None = None) -> dict:
    from .io import transform_to_kv
    cal = report_or_cal.calibration if isinstance(report_or_cal, CalibrationReport) else report_or_cal
    d = transform_to_kv("probe.t_T_I", cal.t_T_I)
    d["probe.sx"] = cal.sx
    d["probe.sy"] = cal.sy
    if isinstance(report_or_cal, CalibrationReport):
        phantom = report_or_cal.phantom
        d["probe.rms"] = report_or_cal.rms
        d["probe.frames"] = len(report_or_cal.residuals)
        d["probe.frame_residuals"] = np.linalg.norm(report_or_cal.residuals, axis=1)
    if phantom is not None:
        d["phantom.cross_point"] = phantom.cross_point_world
    return d


def calibration_from_kv(d) -> ProbeCalibration:
    from .io import transform_from_kv
    try:
        return ProbeCalibration(transform_from_kv(d, "probe.t_T_I"), float(d["probe.sx"]), float(d["probe.sy"]))
    except KeyError as e:
        raise DegenerateInput(f"missing key {e}") from None


def load_scans(directory) -> list[TrackedBScan]:
    """Read ``bscans/*.pgm`` and ``poses.txt`` (frame id -> 12 pose numbers)."""
    from .io import read_kv, read_pgm, read_poses
    d = Path(directory)
    poses = read_poses(d / "poses.txt")
    meta = read_kv(d / "meta.txt") if (d / "meta.txt").exists() else {}
    fps = float(meta.get("fps", 30.0))
    scans = []
    for fid in sorted(poses):
        path = d / "bscans" / f"frame_{fid:04d}.pgm"
        if not path.exists():
            raise DegenerateInput(f"missing B-scan {path}")
        img = read_pgm(path)
        scans.append(TrackedBScan(img, poses[fid], fid / fps, blank=not np.any(img > 2 * np.median(img) + 10)))
    return scans


def save_scans(directory, scans: Sequence[TrackedBScan], depth_mm: float = DEFAULT_DEPTH_MM) -> None:
    from .io import write_kv, write_pgm, write_poses
    d = Path(directory)
    (d / "bscans").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(scans):
        write_pgm(d / "bscans" / f"frame_{i:04d}.pgm", s.image)
    write_poses(d / "poses.txt", {i: s.probe_pose for i, s in enumerate(scans)})
    h, w = scans[0].image.shape if scans else DEFAULT_IMAGE_SIZE[::-1]
    write_kv(d / "meta.txt", {"width": w, "height": h, "depth_mm": depth_mm, "fps": 30.0})
