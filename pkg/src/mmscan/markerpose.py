"""Three-circle target detection and stereo pose estimation.

Detection is classical: dark connected components, sub-pixel edge points
along rays from each blob centroid, and a direct least-squares ellipse fit.
Anything implementing :class:`CenterDetector` can replace it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import AmbiguousTarget, DegenerateInput, ScaleMismatch, TargetNotVisible
from .geometry import CameraModel, RigidTransform, triangulate


@dataclass(frozen=True)
class MarkerGeometry:
    """Circle centres c0 (origin), c1 on +x at ``d01``, c2 on +y at ``d02``."""

    d01: float = 40.0
    d02: float = 40.0
    radius: float = 7.5
    plate_margin: float = 15.0

    def __post_init__(self):
        if not (self.d01 > 2 * self.radius and self.d02 > 2 * self.radius):
            raise DegenerateInput("circle spacing must exceed the circle diameter")

    def centers(self) -> np.ndarray:
        return np.array([[0.0, 0.0, 0.0], [self.d01, 0.0, 0.0], [0.0, self.d02, 0.0]])


@dataclass
class Blob:
    centroid: np.ndarray
    area: int
    fill_ratio: float
    pixels: tuple[np.ndarray, np.ndarray]   # (rows, cols)


@dataclass
class Ellipse:
    center: np.ndarray
    axes: tuple[float, float]     # semi-axes, major first
    angle: float                  # radians, major axis vs +u
    residual: float               # RMS Sampson distance (px)
    conic: np.ndarray             # (A, B, C, D, E, F) of A u^2 + B uv + C v^2 + D u + E v + F


@dataclass
class MarkerDetection:
    centers: np.ndarray           # (3, 2) ordered by ID
    view: str = "cam1"
    residual: float = 0.0
    ellipses: list[Ellipse] = field(default_factory=list)


@dataclass
class TargetPose:
    pose: RigidTransform          # target frame -> world
    residual: float               # RMS triangulation reprojection error (px)
    points: np.ndarray            # triangulated c0, c1, c2

    def as_row(self) -> np.ndarray:
        return self.pose.as_row()


def detect_blobs(image, area_range=(50, 20000), min_fill=0.8, threshold: float | None = None) -> list[Blob]:
    """Dark connected regions that look like filled ellipses.

    Pixels count as dark below ``threshold``, by default ``mean - 2*std``
    (suited to a few dark discs on a bright plate filling the view).
    """
    img = np.asarray(image, dtype=float)
    thr = img.mean() - 2.0 * img.std() if threshold is None else threshold
    labels, n = ndimage.label(img < thr)
    if n == 0:
        return []
    blobs = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        rr, cc = np.nonzero(labels[sl] == i)
        area = len(rr)
        if not (area_range[0] <= area <= area_range[1]):
            continue
        rr = rr + sl[0].start
        cc = cc + sl[1].start
        cov = np.cov(np.vstack([cc, rr]).astype(float)) + np.eye(2) / 12.0
        ev = np.linalg.eigvalsh(cov)
        if ev[0] <= 0:
            continue
        # a filled ellipse with these second moments has area 4*pi*sqrt(det)
        fill = area / (4.0 * np.pi * np.sqrt(ev[0] * ev[1]))
        if fill < min_fill or fill > 1.0 / min_fill:
            continue
        blobs.append(Blob(np.array([cc.mean(), rr.mean()]), area, float(fill), (rr, cc)))
    return blobs


def fit_ellipse(points) -> Ellipse:
    """Direct least-squares ellipse fit (Fitzgibbon, numerically stable split form)."""
    P = np.asarray(points, dtype=float)
    if len(P) < 5:
        raise DegenerateInput("ellipse fit needs at least 5 points")
    mu = P.mean(axis=0)
    s = np.sqrt(np.mean(np.sum((P - mu) ** 2, axis=1)))
    if s < 1e-12:
        raise DegenerateInput("degenerate point scatter")
    x = (P[:, 0] - mu[0]) / s
    y = (P[:, 1] - mu[1]) / s
    if np.linalg.svd(np.column_stack([x, y]), compute_uv=False)[-1] < 1e-6 * np.sqrt(len(P)):
        raise DegenerateInput("points are collinear")
    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1, S2, S3 = D1.T @ D1, D1.T @ D2, D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError:
        raise DegenerateInput("degenerate point scatter") from None
    M = S1 + S2 @ T
    M = np.array([M[2] / 2, -M[1], M[0] / 2])
    w, v = np.linalg.eig(M)
    v = np.real(v)
    cond = 4 * v[0] * v[2] - v[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if len(ok) == 0:
        raise DegenerateInput("no elliptical solution")
    a1 = v[:, ok[np.argmin(np.abs(np.real(w[ok])))]]
    a = np.concatenate([a1, T @ a1])
    # undo normalization: x = (u - mu0)/s
    A, B, C, D, E, F = a
    A2, B2, C2 = A / s ** 2, B / s ** 2, C / s ** 2
    D2_ = D / s - 2 * A2 * mu[0] - B2 * mu[1]
    E2 = E / s - 2 * C2 * mu[1] - B2 * mu[0]
    F2 = (F + A2 * mu[0] ** 2 + B2 * mu[0] * mu[1] + C2 * mu[1] ** 2
          - (D / s) * mu[0] - (E / s) * mu[1])
    conic = np.array([A2, B2, C2, D2_, E2, F2])
    conic /= np.linalg.norm(conic)
    return _ellipse_from_conic(conic, P)


def _ellipse_from_conic(conic, P=None) -> Ellipse:
    A, B, C, D, E, F = conic
    Q = np.array([[A, B / 2], [B / 2, C]])
    center = np.linalg.solve(Q, [-D / 2, -E / 2])
    Fc = F + 0.5 * (D * center[0] + E * center[1])
    ev, evec = np.linalg.eigh(Q / -Fc)
    if np.any(ev <= 0):
        raise DegenerateInput("conic is not an ellipse")
    semi = 1.0 / np.sqrt(ev)           # ascending eigenvalues -> major first
    angle = float(np.arctan2(evec[1, 0], evec[0, 0]))
    residual = 0.0
    if P is not None:
        u, v = P[:, 0], P[:, 1]
        val = A * u * u + B * u * v + C * v * v + D * u + E * v + F
        gu = 2 * A * u + B * v + D
        gv = B * u + 2 * C * v + E
        residual = float(np.sqrt(np.mean(val ** 2 / (gu ** 2 + gv ** 2))))
    return Ellipse(center, (float(semi[0]), float(semi[1])), angle, residual, np.asarray(conic))


def subpixel_contour(image, blob: Blob, n_rays: int = 90) -> np.ndarray:
    """Edge points where the intensity crosses the inside/outside midpoint level."""
    img = np.asarray(image, dtype=float)
    c = blob.centroid
    r_est = np.sqrt(blob.area / np.pi)
    inside = np.median(img[blob.pixels])
    ang = np.linspace(0, 2 * np.pi, n_rays, endpoint=False)
    radii = np.arange(0.0, 2.2 * r_est + 6, 0.25)
    us = c[0] + np.cos(ang)[:, None] * radii[None]
    vs = c[1] + np.sin(ang)[:, None] * radii[None]
    prof = ndimage.map_coordinates(img, [vs.ravel(), us.ravel()], order=1, mode="nearest").reshape(us.shape)
    ring = prof[:, (radii > 1.6 * r_est + 3)]
    # upper percentile: near a target's corner most of the ring may leave the bright plate
    outside = np.percentile(ring, 90)
    level = 0.5 * (inside + outside)
    pts = []
    for k in range(n_rays):
        p = prof[k]
        above = np.flatnonzero(p >= level)
        if len(above) == 0 or above[0] == 0:
            continue
        j = above[0]
        f = (level - p[j - 1]) / (p[j] - p[j - 1])
        r = radii[j - 1] + f * (radii[j] - radii[j - 1])
        pts.append([c[0] + r * np.cos(ang[k]), c[1] + r * np.sin(ang[k])])
    return np.array(pts)


class CenterDetector(Protocol):
    def __call__(self, image) -> list[Ellipse]:
        """Return sub-pixel circle centres (as ellipses) found in ``image``."""


class ClassicalCenterDetector:
    """Blob + sub-pixel edge + ellipse-fit detector."""

    def __init__(self, area_range=(50, 20000), min_fill=0.8, max_residual=0.5, threshold=None):
        self.area_range = area_range
        self.min_fill = min_fill
        self.max_residual = max_residual
        self.threshold = threshold

    def __call__(self, image) -> list[Ellipse]:
        out = []
        thr = self.threshold(image) if callable(self.threshold) else self.threshold
        for b in detect_blobs(image, self.area_range, self.min_fill, thr):
            pts = subpixel_contour(image, b)
            if len(pts) < 5:
                continue
            try:
                e = fit_ellipse(pts)
            except DegenerateInput:
                continue
            if e.residual < self.max_residual:
                out.append(e)
        return out


def _angles(P):
    out = []
    for i in range(3):
        a = P[(i + 1) % 3] - P[i]
        b = P[(i + 2) % 3] - P[i]
        c = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        out.append(np.degrees(np.arccos(np.clip(c, -1, 1))))
    return np.array(out)


def label_view(centers, max_angle_dev: float = 20.0) -> np.ndarray:
    """Order three image points as (c0, c1, c2).

    c0 is the vertex closest to a right angle; c1/c2 are chosen so the target
    normal ``x × y`` faces the camera, which in image coordinates (v down)
    means a negative 2-D cross product of (c1 - c0, c2 - c0).
    """
    P = np.asarray(centers, dtype=float)
    if P.shape != (3, 2):
        raise AmbiguousTarget(f"expected exactly 3 centres, got {len(P)}")
    dev = np.abs(_angles(P) - 90.0)
    i0 = int(np.argmin(dev))
    if dev[i0] > max_angle_dev:
        raise AmbiguousTarget("no vertex is close to a right angle")
    i1, i2 = (i0 + 1) % 3, (i0 + 2) % 3
    a, b = P[i1] - P[i0], P[i2] - P[i0]
    if a[0] * b[1] - a[1] * b[0] > 0:
        i1, i2 = i2, i1
    return P[[i0, i1, i2]]


def _epipolar_distance(F, p, q) -> float:
    l = F @ np.array([p[0], p[1], 1.0])
    return abs(l @ np.array([q[0], q[1], 1.0])) / np.hypot(l[0], l[1])


def assign_ids(view1, view2, cams: tuple[CameraModel, CameraModel] | None = None,
               max_epipolar_px: float = 5.0, max_angle_dev: float = 20.0) -> tuple[MarkerDetection, MarkerDetection]:
    """Order the centres of both views as (c0, c1, c2).

    Without cameras each view is labelled on its own from the projected
    right angle. With cameras the centres are first paired across views by
    epipolar distance and triangulated, and the labelling is done on the 3-D
    triangle, which stays valid for oblique views where perspective bends
    the projected angle.
    """
    c1 = _as_points(view1)
    c2 = _as_points(view2)
    if cams is None:
        return MarkerDetection(label_view(c1, max_angle_dev), "cam1"), MarkerDetection(label_view(c2, max_angle_dev), "cam2")
    if c1.shape != (3, 2) or c2.shape != (3, 2):
        raise AmbiguousTarget(f"expected exactly 3 centres per view, got {len(c1)} and {len(c2)}")
    F = fundamental_matrix(*cams)
    cost = {perm: [_epipolar_distance(F, c1[i], c2[j]) for i, j in enumerate(perm)]
            for perm in itertools.permutations(range(3))}
    perm = min(cost, key=lambda k: sum(cost[k]))
    if max(cost[perm]) > max_epipolar_px:
        raise AmbiguousTarget(f"IDs inconsistent across views (epipolar distance {max(cost[perm]):.1f} px)")
    c2 = c2[list(perm)]
    C = np.array([triangulate([(cams[0], p), (cams[1], q)]).point for p, q in zip(c1, c2)])
    dev = np.abs(_angles(C) - 90.0)
    i0 = int(np.argmin(dev))
    if dev[i0] > max_angle_dev:
        raise AmbiguousTarget("no vertex is close to a right angle")
    i1, i2 = (i0 + 1) % 3, (i0 + 2) % 3
    # target normal x × y points towards camera 1
    if np.cross(C[i1] - C[i0], C[i2] - C[i0]) @ (cams[0].center - C[i0]) < 0:
        i1, i2 = i2, i1
    order = [i0, i1, i2]
    return MarkerDetection(c1[order], "cam1"), MarkerDetection(c2[order], "cam2")


def _as_points(v):
    if isinstance(v, MarkerDetection):
        return v.centers
    if len(v) and isinstance(v[0], Ellipse):
        return np.array([e.center for e in v])
    return np.asarray(v, dtype=float)


def fundamental_matrix(cam_a: CameraModel, cam_b: CameraModel) -> np.ndarray:
    """F with ``x_b^T F x_a = 0`` for pixels of the same world point."""
    T = cam_b.world_to_device @ cam_a.pose       # a -> b
    E = np.array([[0, -T.translation[2], T.translation[1]],
                  [T.translation[2], 0, -T.translation[0]],
                  [-T.translation[1], T.translation[0], 0]]) @ T.rotation
    return np.linalg.inv(cam_b.K).T @ E @ np.linalg.inv(cam_a.K)


def estimate_pose(detections: tuple[MarkerDetection, MarkerDetection], cams: tuple[CameraModel, CameraModel],
                  geometry: MarkerGeometry | None = None, scale_tol: float = 0.05) -> TargetPose:
    """Triangulate c0, c1, c2 and build ``R = [x, y, x × y]``, ``t = C0``.

    ``y`` is Gram-Schmidt orthogonalised against ``x`` so ``R`` stays a
    rotation under noise.
    """
    da, db = detections
    ca, cb = cams
    tris = [triangulate([(ca, pa), (cb, pb)]) for pa, pb in zip(da.centers, db.centers)]
    C = np.array([t.point for t in tris])
    x = C[1] - C[0]
    if geometry is not None:
        err = abs(np.linalg.norm(x) - geometry.d01) / geometry.d01
        if err > scale_tol:
            raise ScaleMismatch(f"|C1 - C0| = {np.linalg.norm(x):.2f} mm vs {geometry.d01} mm")
    x /= np.linalg.norm(x)
    y = C[2] - C[0]
    y = y - (y @ x) * x
    y /= np.linalg.norm(y)
    R = np.column_stack([x, y, np.cross(x, y)])
    res = float(np.sqrt(np.mean([t.residual ** 2 for t in tris])))
    return TargetPose(RigidTransform(R, C[0]), res, C)


def projected_circle_center(cam: CameraModel, pose: RigidTransform, center_local, radius) -> np.ndarray:
    """Centre of the image ellipse of a circle lying in the target plane."""
    M = cam.world_to_device @ pose
    c = np.asarray(center_local, float)
    H = cam.K @ np.column_stack([M.rotation[:, 0], M.rotation[:, 1], M.apply(c)])
    Cp = np.diag([1.0, 1.0, -radius ** 2])
    Hi = np.linalg.inv(H)
    Q = Hi.T @ Cp @ Hi
    return np.linalg.solve(Q[:2, :2], -Q[:2, 2])


def correct_projection_bias(detections, cams, geometry: MarkerGeometry, pose: TargetPose,
                            iterations: int = 2) -> TargetPose:
    """Remove the ellipse-centre vs projected-centre offset using a pose estimate."""
    current = pose
    for _ in range(iterations):
        new = []
        for det, cam in zip(detections, cams):
            shift = []
            for c in geometry.centers():
                e_center = projected_circle_center(cam, current.pose, c, geometry.radius)
                shift.append(e_center - cam.project_points(current.pose.apply(c)[None])[0])
            new.append(MarkerDetection(det.centers - np.array(shift), det.view, det.residual, det.ellipses))
        current = estimate_pose(tuple(new), cams, geometry)
    return current


def track_frame(img1, img2, cams, geometry: MarkerGeometry | None = None,
                detector: CenterDetector | None = None, bias_correction: bool = True) -> TargetPose:
    """Detect, label and estimate the target pose from one stereo pair."""
    detector = detector or ClassicalCenterDetector()
    e1, e2 = detector(img1), detector(img2)
    if len(e1) != 3 or len(e2) != 3:
        raise TargetNotVisible(f"expected 3 circles per view, found {len(e1)} and {len(e2)}")
    d1, d2 = assign_ids(e1, e2, cams)
    res = np.sqrt(np.mean([e.residual ** 2 for e in e1 + e2]))
    d1.residual = d2.residual = float(res)
    pose = estimate_pose((d1, d2), cams, geometry)
    if bias_correction and geometry is not None:
        pose = correct_projection_bias((d1, d2), cams, geometry, pose)
    return pose
