"""Parametric surfaces with analytic ray intersection, and the default rig."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import DegenerateInput
from ..geometry import CameraModel, RigidTransform
from ..markerpose import MarkerGeometry


def look_at(position, target, up=(0.0, -1.0, 0.0)) -> RigidTransform:
    """Device-to-world pose of a camera at ``position`` looking at ``target``.

    The image ``v`` axis points along ``-up`` (``up`` defaults to world -y so
    a camera near the origin keeps the world-aligned orientation).
    """
    p = np.asarray(position, float)
    z = np.asarray(target, float) - p
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), p)


class Surface:
    """Base class: ``intersect`` returns ray parameters (inf on miss)."""

    albedo: float | Callable = 0.9

    def intersect(self, origin, dirs) -> np.ndarray:
        raise NotImplementedError

    def normals(self, points) -> np.ndarray:
        raise NotImplementedError

    def albedo_at(self, points) -> np.ndarray:
        if callable(self.albedo):
            return self.albedo(points)
        return np.full(len(points), float(self.albedo))

    def signed_distance(self, points) -> np.ndarray:
        raise NotImplementedError


def _smallest_positive(t1, t2, eps=1e-9):
    t1 = np.where(t1 > eps, t1, np.inf)
    t2 = np.where(t2 > eps, t2, np.inf)
    return np.minimum(t1, t2)


@dataclass
class Plane(Surface):
    """Finite rectangle; ``pose`` maps plane coords (x, y, 0) to world."""

    pose: RigidTransform
    size: tuple[float, float] = (250.0, 190.0)
    albedo: float | Callable = 0.9
    centered: bool = True

    @property
    def normal(self):
        return self.pose.rotation[:, 2]

    def local(self, points):
        return self.pose.inverse().apply(points)

    def intersect(self, origin, dirs):
        n = self.normal
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.pose.translation - origin) @ n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        finite = np.isfinite(t)
        pts = origin + dirs * np.where(finite, t, 0.0)[:, None]
        loc = self.local(pts)
        w, h = self.size
        if self.centered:
            inside = (np.abs(loc[:, 0]) <= w / 2) & (np.abs(loc[:, 1]) <= h / 2)
        else:
            inside = (loc[:, 0] >= 0) & (loc[:, 0] <= w) & (loc[:, 1] >= 0) & (loc[:, 1] <= h)
        return np.where(finite & inside, t, np.inf)

    def normals(self, points):
        return np.broadcast_to(self.normal, (len(points), 3)).copy()

    def signed_distance(self, points):
        return (np.asarray(points) - self.pose.translation) @ self.normal


@dataclass
class Sphere(Surface):
    center: np.ndarray
    radius: float
    albedo: float | Callable = 0.9

    def __post_init__(self):
        self.center = np.asarray(self.center, float)

    def intersect(self, origin, dirs):
        oc = origin - self.center
        b = dirs @ oc if oc.ndim == 1 else np.sum(dirs * oc, axis=1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.where(disc >= 0, disc, 0.0))
        t = _smallest_positive(-b - sq, -b + sq)
        return np.where(disc >= 0, t, np.inf)

    def normals(self, points):
        n = np.asarray(points) - self.center
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def signed_distance(self, points):
        return np.linalg.norm(np.asarray(points) - self.center, axis=-1) - self.radius


@dataclass
class Cylinder(Surface):
    """Lateral surface of a finite cylinder centred on ``point``."""

    point: np.ndarray
    axis: np.ndarray
    radius: float
    length: float = 120.0
    albedo: float | Callable = 0.9

    def __post_init__(self):
        self.point = np.asarray(self.point, float)
        self.axis = np.asarray(self.axis, float) / np.linalg.norm(self.axis)

    def intersect(self, origin, dirs):
        a = self.axis
        oc = np.broadcast_to(origin - self.point, dirs.shape)
        d_perp = dirs - np.outer(dirs @ a, a)
        o_perp = oc - np.outer(oc @ a, a)
        A = np.sum(d_perp ** 2, axis=1)
        B = np.sum(d_perp * o_perp, axis=1)
        C = np.sum(o_perp ** 2, axis=1) - self.radius ** 2
        disc = B * B - A * C
        ok = (disc >= 0) & (A > 1e-15)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        Asafe = np.where(ok, A, 1.0)
        out = np.full(len(dirs), np.inf)
        for t in ((-B - sq) / Asafe, (-B + sq) / Asafe):
            s = (oc + dirs * t[:, None]) @ a
            good = ok & (t > 1e-9) & (np.abs(s) <= self.length / 2) & (t < out)
            out = np.where(good, t, out)
        return out

    def normals(self, points):
        v = np.asarray(points) - self.point
        v = v - np.outer(v @ self.axis, self.axis)
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def signed_distance(self, points):
        v = np.atleast_2d(points) - self.point
        v = v - np.outer(v @ self.axis, self.axis)
        return np.linalg.norm(v, axis=1) - self.radius


@dataclass
class Superellipsoid(Surface):
    """Dome ``|x/a|^n + |y/b|^n + |z/c|^n = 1`` with local ``z >= 0``.

    ``pose`` maps the local frame to world; local +z is the dome apex.
    """

    pose: RigidTransform
    semi_axes: tuple[float, float, float] = (85.0, 65.0, 55.0)
    exponent: float = 2.5
    albedo: float | Callable = 0.9

    def implicit(self, local):
        a, b, c = self.semi_axes
        n = self.exponent
        return (np.abs(local[..., 0] / a) ** n + np.abs(local[..., 1] / b) ** n
                + np.abs(local[..., 2] / c) ** n)

    def intersect(self, origin, dirs, samples: int = 96, bisections: int = 40):
        inv = self.pose.inverse()
        o = inv.apply(origin)
        d = inv.apply_vector(dirs)
        # bounding sphere
        R = float(np.max(self.semi_axes)) * 1.05
        b = d @ o if o.ndim == 1 else np.sum(d * o, axis=1)
        c = float(o @ o) - R * R
        disc = b * b - c
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = np.maximum(-b - sq, 0.0)
        t1 = -b + sq
        idx = np.flatnonzero(hit & (t1 > 0))
        out = np.full(len(d), np.inf)
        if len(idx) == 0:
            return out
        ts = t0[idx, None] + (t1 - t0)[idx, None] * np.linspace(0, 1, samples)[None]
        pts = o + d[idx, None, :] * ts[..., None]
        inside = (self.implicit(pts) <= 1.0) & (pts[..., 2] >= 0)
        first = np.argmax(inside, axis=1)
        any_in = inside[np.arange(len(idx)), first]
        idx, first = idx[any_in], first[any_in]
        ts = ts[any_in]
        lo = ts[np.arange(len(idx)), np.maximum(first - 1, 0)]
        hi = ts[np.arange(len(idx)), first]
        for _ in range(bisections):
            mid = 0.5 * (lo + hi)
            p = o + d[idx] * mid[:, None]
            ins = (self.implicit(p) <= 1.0) & (p[:, 2] >= 0)
            hi = np.where(ins, mid, hi)
            lo = np.where(ins, lo, mid)
        out[idx] = hi
        return out

    def normals(self, points):
        loc = self.pose.inverse().apply(points)
        a = np.array(self.semi_axes)
        n = self.exponent
        g = n * np.sign(loc) * np.abs(loc / a) ** (n - 1) / a
        flat = loc[:, 2] <= 1e-6
        g[flat] = [0, 0, -1]
        g = self.pose.apply_vector(g)
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def contains(self, points) -> np.ndarray:
        loc = self.pose.inverse().apply(np.atleast_2d(points))
        return (self.implicit(loc) < 1.0) & (loc[:, 2] > 0)

    def signed_distance(self, points):
        loc = self.pose.inverse().apply(np.atleast_2d(points))
        return self.implicit(loc) ** (1.0 / self.exponent) - 1.0


def cast(surfaces: Sequence[Surface], origin, dirs) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit over several surfaces: ``(t, surface index or -1)``."""
    t_best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1)
    for i, s in enumerate(surfaces):
        t = s.intersect(origin, dirs)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        which = np.where(closer, i, which)
    return t_best, which


def circle_grid_albedo(board_points, radius, dark=0.25, light=0.9):
    """Albedo function for a plane whose local frame carries dark discs."""
    centers = np.asarray(board_points)[:, :2]

    def albedo(local_points):
        d2 = np.min(((local_points[:, None, :2] - centers[None]) ** 2).sum(-1), axis=1)
        return np.where(d2 <= radius ** 2, dark, light)

    return albedo


@dataclass
class Rig:
    cam1: CameraModel
    cam2: CameraModel
    projector: CameraModel

    def device(self, name: str) -> CameraModel:
        try:
            return {"cam1": self.cam1, "cam2": self.cam2, "projector": self.projector}[name]
        except KeyError:
            raise DegenerateInput(f"unknown device {name!r}") from None


def default_rig(standoff: float = 700.0, baseline: float = 150.0, scale: float = 1.0,
                camera_focal: float = 2400.0, projector_focal: float = 2000.0) -> Rig:
    """Camera 1 at the world origin, camera 2 and the projector on either side.

    ``scale`` shrinks image sizes and focal lengths together (for fast tests).
    """
    def cam(f, w, h, pose):
        return CameraModel(f * scale, f * scale, (w * scale) / 2, (h * scale) / 2,
                           (int(round(w * scale)), int(round(h * scale))), pose)

    cam1 = cam(camera_focal, 1280, 1024, RigidTransform())
    cam2 = cam(camera_focal, 1280, 1024, look_at([baseline, 0.0, 0.0], [0.0, 0.0, standoff]))
    proj = cam(projector_focal, 1280, 800, look_at([-baseline, 0.0, 0.0], [0.0, 0.0, standoff - 20.0]))
    return Rig(cam1, cam2, proj)


@dataclass
class NoiseModel:
    pixel_sigma: float = 0.0        # gray levels, camera images
    pose_sigma_rot_deg: float = 0.0  # per-axis rotation-vector noise of tracked poses
    pose_sigma_trans: float = 0.0    # per-axis translation noise (mm)
    speckle_sigma: float = 0.0       # log-normal multiplicative US speckle
    segmentation_sigma: float = 0.0  # echo displacement (px)
    observation_sigma: float = 0.0   # calibration point noise (px)

    @classmethod
    def reference(cls) -> "NoiseModel":
        """Tracking 0.1 deg / 0.1 mm, 0.5 px echo displacement, 1 gray level, 0.1 px points."""
        return cls(pixel_sigma=1.0, pose_sigma_rot_deg=0.1, pose_sigma_trans=0.1,
                   speckle_sigma=0.2, segmentation_sigma=0.5, observation_sigma=0.1)


@dataclass
class Scene:
    surfaces: list[Surface]
    rig: Rig = field(default_factory=default_rig)
    marker: MarkerGeometry = field(default_factory=MarkerGeometry)
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    ambient: float = 0.0

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])
