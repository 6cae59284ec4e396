"""Rigid transforms, pinhole cameras, projection and triangulation.

Conventions: millimetres in space, pixels on image planes, right-handed
frames. A camera's ``pose`` maps device coordinates to world coordinates
(``X_world = R @ X_dev + t``); the world frame is camera 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateInput, DegenerateRays, PointBehindCamera


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(w) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def matrix_to_rotvec(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def nearest_rotation(M) -> np.ndarray:
    """Orthogonal polar factor of ``M`` with determinant forced to +1."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_angle_deg(Ra, Rb) -> float:
    """Geodesic angle between two rotation matrices, in degrees."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element. ``apply(x) = rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise DegenerateInput(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DegenerateInput("non-finite transform")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotvec_to_matrix(rotvec), translation)

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_row(cls, values: Sequence[float]) -> "RigidTransform":
        """Inverse of :meth:`as_row`: 9 rotation entries (row-major) + 3 translation."""
        v = np.asarray(values, dtype=float)
        if v.size != 12:
            raise DegenerateInput(f"pose row needs 12 numbers, got {v.size}")
        return cls(v[:9].reshape(3, 3), v[9:])

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.rotation.ravel(), self.translation])

    @property
    def rotvec(self) -> np.ndarray:
        return matrix_to_rotvec(self.rotation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        """Transform a point (3,) or an array of points (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (np.linalg.norm(R.T @ R - np.eye(3)) < tol
                and abs(np.linalg.det(R) - 1.0) < tol)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``compose(a, b)(x) == a(b(x))``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera (or projector treated as an inverse camera).

    ``distortion`` holds optional radial coefficients ``(k1, k2)`` applied to
    normalized coordinates; ``None`` disables it.
    """

    fu: float
    fv: float
    cu: float
    cv: float
    image_size: tuple[int, int]
    pose: RigidTransform = field(default_factory=RigidTransform)
    distortion: tuple[float, float] | None = None

    def __post_init__(self):
        w, h = self.image_size
        object.__setattr__(self, "image_size", (int(w), int(h)))
        if not (self.fu > 0 and self.fv > 0):
            raise DegenerateInput("focal lengths must be positive")
        if not (0 <= self.cu < w and 0 <= self.cv < h):
            raise DegenerateInput("principal point outside the image")
        if self.distortion is not None:
            object.__setattr__(self, "distortion", tuple(float(k) for k in self.distortion))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fu, 0.0, self.cu], [0.0, self.fv, self.cv], [0.0, 0.0, 1.0]])

    @property
    def world_to_device(self) -> RigidTransform:
        return self.pose.inverse()

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix ``K [R | t]`` mapping homogeneous world points to pixels."""
        M = self.world_to_device.matrix()[:3]
        return self.K @ M

    def with_pose(self, pose: RigidTransform) -> "CameraModel":
        return CameraModel(self.fu, self.fv, self.cu, self.cv, self.image_size, pose, self.distortion)

    def with_intrinsics(self, fu, fv, cu, cv, distortion=None) -> "CameraModel":
        return CameraModel(fu, fv, cu, cv, self.image_size, self.pose,
                           distortion if distortion is not None else self.distortion)

    def distort(self, xn: np.ndarray) -> np.ndarray:
        if self.distortion is None:
            return xn
        k1, k2 = self.distortion
        r2 = np.sum(xn ** 2, axis=-1, keepdims=True)
        return xn * (1.0 + k1 * r2 + k2 * r2 ** 2)

    def undistort(self, xd: np.ndarray, iterations: int = 20) -> np.ndarray:
        if self.distortion is None:
            return xd
        k1, k2 = self.distortion
        xn = np.array(xd, dtype=float)
        for _ in range(iterations):
            r2 = np.sum(xn ** 2, axis=-1, keepdims=True)
            xn = xd / (1.0 + k1 * r2 + k2 * r2 ** 2)
        return xn

    def to_device(self, points) -> np.ndarray:
        return self.world_to_device.apply(points)

    def project_points(self, points, check_depth: bool = True) -> np.ndarray:
        """Project world points (N, 3) to pixels (N, 2)."""
        Xc = self.to_device(np.atleast_2d(points))
        z = Xc[:, 2]
        if check_depth and np.any(z <= 0):
            raise PointBehindCamera("point has non-positive depth in camera frame")
        xn = self.distort(Xc[:, :2] / z[:, None])
        return np.column_stack([self.fu * xn[:, 0] + self.cu, self.fv * xn[:, 1] + self.cv])

    def normalized(self, pixels) -> np.ndarray:
        """Pixels (N, 2) to undistorted normalized image coordinates."""
        px = np.atleast_2d(np.asarray(pixels, dtype=float))
        xd = np.column_stack([(px[:, 0] - self.cu) / self.fu, (px[:, 1] - self.cv) / self.fv])
        return self.undistort(xd)

    def rays(self, pixels) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions in world for pixels (N, 2); origin is the camera center."""
        xn = self.normalized(pixels)
        d = np.column_stack([xn, np.ones(len(xn))])
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center, self.pose.apply_vector(d)

    def backproject(self, pixels, depth) -> np.ndarray:
        """World points at the given camera-frame depth(s) along pixel rays."""
        xn = self.normalized(pixels)
        depth = np.broadcast_to(np.asarray(depth, dtype=float), (len(xn),))
        Xc = np.column_stack([xn * depth[:, None], depth])
        return self.pose.apply(Xc)

    def in_image(self, pixels, margin: float = 0.0) -> np.ndarray:
        px = np.atleast_2d(pixels)
        w, h = self.image_size
        return ((px[:, 0] >= -0.5 + margin) & (px[:, 0] <= w - 0.5 - margin)
                & (px[:, 1] >= -0.5 + margin) & (px[:, 1] <= h - 0.5 - margin))


def project(cam: CameraModel, X) -> np.ndarray:
    """Project a single world point to ``(u, v)``."""
    return cam.project_points(np.asarray(X, dtype=float).reshape(1, 3))[0]


@dataclass(frozen=True)
class Triangulation:
    point: np.ndarray
    residual: float  # RMS reprojection error over views (px)


def _reproj_jacobian(cam: CameraModel, X: np.ndarray):
    """Pixel of ``X`` and d(pixel)/dX, ignoring distortion."""
    Rcw = cam.world_to_device.rotation
    Xc = cam.to_device(X[None])[0]
    x, y, z = Xc
    J = np.array([[cam.fu / z, 0.0, -cam.fu * x / z ** 2],
                  [0.0, cam.fv / z, -cam.fv * y / z ** 2]]) @ Rcw
    return J


def triangulate(obs: Iterable[tuple[CameraModel, Sequence[float]]], refine: bool = True) -> Triangulation:
    """Linear triangulation from two or more views plus one Gauss-Newton polish.

    Each pixel is moved to normalized camera coordinates before building the
    DLT system, which conditions it independently of focal length and
    principal point.
    """
    obs = list(obs)
    if len(obs) < 2:
        raise DegenerateRays("need at least two observations")
    rows = []
    for cam, px in obs:
        xn = cam.normalized(np.asarray(px, dtype=float).reshape(1, 2))[0]
        M = cam.world_to_device.matrix()[:3]
        rows.append(xn[0] * M[2] - M[0])
        rows.append(xn[1] * M[2] - M[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, Vt = np.linalg.svd(A)
    if s[2] / s[0] < 1e-10:
        raise DegenerateRays("rays are parallel or views coincide")
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-300:
        raise DegenerateRays("point at infinity")
    X = Xh[:3] / Xh[3]

    def residuals(X):
        return np.concatenate([cam.project_points(X[None], check_depth=False)[0] - np.asarray(px, float)
                               for cam, px in obs])

    if refine:
        r = residuals(X)
        J = np.vstack([_reproj_jacobian(cam, X) for cam, _ in obs])
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        X_new = X + step
        if np.sum(residuals(X_new) ** 2) <= np.sum(r ** 2):
            X = X_new
    r = residuals(X).reshape(-1, 2)
    return Triangulation(X, float(np.sqrt(np.mean(np.sum(r ** 2, axis=1)))))


def triangulation_covariance(obs: Iterable[tuple[CameraModel, Sequence[float]]], X, sigma_px: float) -> np.ndarray:
    """First-order covariance of a triangulated point under isotropic pixel noise."""
    J = np.vstack([_reproj_jacobian(cam, np.asarray(X, float)) for cam, _ in obs])
    return sigma_px ** 2 * np.linalg.inv(J.T @ J)


def reprojection_rms(cam: CameraModel, points3d, points2d) -> float:
    """RMS of the pixel distance between projected ``points3d`` and ``points2d``."""
    X = np.atleast_2d(np.asarray(points3d, dtype=float))
    x = np.atleast_2d(np.asarray(points2d, dtype=float))
    if X.size == 0 or len(X) != len(x):
        raise DegenerateInput("reprojection_rms needs matching nonempty point lists")
    d = cam.project_points(X) - x
    return float(np.sqrt(np.mean(np.sum(d ** 2, axis=1))))
