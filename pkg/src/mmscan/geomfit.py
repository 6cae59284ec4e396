"""Least-squares plane, sphere and cylinder fits with orthogonal-distance RMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInput, NonConvergence
from .lm import levenberg_marquardt, numeric_jacobian


@dataclass(frozen=True)
class PlaneModel:
    normal: np.ndarray
    offset: float       # n . x = offset
    rms: float = 0.0

    def distances(self, points) -> np.ndarray:
        return np.asarray(points) @ self.normal - self.offset


@dataclass(frozen=True)
class SphereModel:
    center: np.ndarray
    radius: float
    rms: float = 0.0

    def distances(self, points) -> np.ndarray:
        return np.linalg.norm(np.asarray(points) - self.center, axis=1) - self.radius


@dataclass(frozen=True)
class CylinderModel:
    point: np.ndarray
    axis: np.ndarray
    radius: float
    rms: float = 0.0

    def distances(self, points) -> np.ndarray:
        return axis_distance(points, self.point, self.axis) - self.radius


@dataclass(frozen=True)
class GapResult:
    gap: float
    axis_angle_deg: float
    axis_offset: float   # distance from the inner axis point to the outer axis line


def axis_distance(points, point, axis) -> np.ndarray:
    v = np.asarray(points, float) - point
    return np.linalg.norm(v - np.outer(v @ axis, axis), axis=1)


def _rms(r) -> float:
    return float(np.sqrt(np.mean(np.square(r))))


def _as_points(cloud, minimum: int) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), float).reshape(-1, 3)
    if len(pts) < minimum:
        raise DegenerateInput(f"need at least {minimum} points, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateInput("non-finite points")
    return pts


def _principal_axes(pts):
    c = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - c, full_matrices=False)
    return c, s, vt


def fit_plane(cloud) -> PlaneModel:
    """Total least squares: the normal is the smallest principal direction."""
    pts = _as_points(cloud, 3)
    c, s, vt = _principal_axes(pts)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateInput("points are collinear")
    n = vt[2]
    # deterministic sign: largest component positive
    if n[np.argmax(np.abs(n))] < 0:
        n = -n
    d = float(n @ c)
    return PlaneModel(n, d, _rms(pts @ n - d))


def _planar(pts) -> bool:
    _, s, _ = _principal_axes(pts)
    return s[2] <= 1e-9 * s[0]


def fit_sphere(cloud) -> SphereModel:
    """Algebraic fit refined by LM on radial residuals."""
    pts = _as_points(cloud, 4)
    if _planar(pts):
        raise DegenerateInput("points are coplanar")
    shift = pts.mean(axis=0)
    p = pts - shift
    A = np.column_stack([2 * p, np.ones(len(p))])
    sol, *_ = np.linalg.lstsq(A, np.sum(p * p, axis=1), rcond=None)
    c0 = sol[:3]
    r0 = np.sqrt(sol[3] + c0 @ c0)

    def residual(x):
        return np.linalg.norm(p - x[:3], axis=1) - x[3]

    def jacobian(x):
        v = p - x[:3]
        return np.column_stack([-v / np.linalg.norm(v, axis=1, keepdims=True), -np.ones(len(p))])

    res = levenberg_marquardt(residual, jacobian, np.append(c0, r0), max_iter=200)
    if not res.converged:
        raise NonConvergence(f"sphere fit: {res.reason}")
    c, r = res.x[:3] + shift, abs(res.x[3])
    return SphereModel(c, float(r), _rms(residual(res.x)))


def _perp_basis(d):
    a = np.eye(3)[np.argmin(np.abs(d))]
    e1 = np.cross(d, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def _fit_circle_2d(xy):
    A = np.column_stack([2 * xy, np.ones(len(xy))])
    sol, *_ = np.linalg.lstsq(A, np.sum(xy * xy, axis=1), rcond=None)
    c = sol[:2]
    return c, np.sqrt(max(sol[2] + c @ c, 0.0))


def _normal_axis(pts, k: int = 12) -> np.ndarray:
    """Direction least represented among local surface normals."""
    tree = cKDTree(pts)
    _, nn = tree.query(pts, k=min(k, len(pts)))
    nb = pts[nn] - pts[nn].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    _, v = np.linalg.eigh(normals.T @ normals)
    return v[:, 0]


def fit_cylinder(cloud, max_iter: int = 200) -> CylinderModel:
    """Geometric cylinder fit.

    Two axis guesses are tried (the direction missing from the local surface
    normals, and the major principal axis) and each is refined by LM over a
    local 5-parameter increment: axis tilt (2), axis point within the plane
    through the centroid perpendicular to the axis (2), radius (1).
    """
    pts = _as_points(cloud, 6)
    c, s, vt = _principal_axes(pts)
    if s[2] <= 1e-6 * s[0]:
        raise DegenerateInput("points are coplanar")
    extent = float(s[0] / np.sqrt(len(pts)))
    p = pts - c

    def unpack(x):
        return x[:3], x[3:6], x[6]

    def retract(x, dx):
        d, q, r = unpack(x)
        e1, e2 = _perp_basis(d)
        d2 = d + dx[0] * e1 + dx[1] * e2
        d2 /= np.linalg.norm(d2)
        q2 = q + dx[2] * e1 + dx[3] * e2
        q2 = q2 - (q2 @ d2) * d2
        return np.concatenate([d2, q2, [r + dx[4]]])

    def residual(x):
        d, q, r = unpack(x)
        return axis_distance(p, q, d) - r

    def jacobian(x):
        return numeric_jacobian(residual, x, retract=retract, n_params=5)

    guesses = [_normal_axis(pts)] if len(pts) >= 12 else []
    guesses.append(vt[0])
    best = None
    for d in guesses:
        e1, e2 = _perp_basis(d)
        xy = np.column_stack([p @ e1, p @ e2])
        cc, r0 = _fit_circle_2d(xy)
        x0 = np.concatenate([d, cc[0] * e1 + cc[1] * e2, [r0]])
        res = levenberg_marquardt(residual, jacobian, x0, retract=retract, max_iter=max_iter)
        if best is None or res.cost < best.cost:
            best = res
    d, q, r = unpack(best.x)
    if not np.isfinite(r) or abs(r) > 1e3 * max(extent, 1.0):
        raise DegenerateInput("no finite cylinder fits these points")
    if not best.converged:
        raise NonConvergence(f"cylinder fit: {best.reason}")
    if d[np.argmax(np.abs(d))] < 0:
        d = -d
    return CylinderModel(q + c, d, float(abs(r)), _rms(residual(best.x)))


def cylinder_gap(inner: CylinderModel, outer: CylinderModel, max_angle_deg: float = 5.0) -> GapResult:
    """Radial wall distance ``r_outer - r_inner`` for near-coaxial cylinders."""
    cosang = min(abs(float(inner.axis @ outer.axis)), 1.0)
    angle = float(np.degrees(np.arccos(cosang)))
    if angle >= max_angle_deg:
        raise DegenerateInput(f"cylinder axes differ by {angle:.2f} deg")
    offset = float(axis_distance(inner.point[None], outer.point, outer.axis)[0])
    return GapResult(outer.radius - inner.radius, angle, offset)
