"""Ray-cast renderers for fringe captures, marker stereo views and B-scans."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..errors import DegenerateInput, TargetNotVisible
from ..geometry import CameraModel, RigidTransform, rotvec_to_matrix
from ..markerpose import MarkerGeometry
from ..usfreehand import ProbeCalibration, TrackedBScan
from .scene import Scene, Surface, cast

TWO_PI = 2.0 * np.pi


@dataclass
class FringeCapture:
    images: list[np.ndarray]           # one per projected pattern, uint8
    proj_xy: np.ndarray                # projector coordinates per camera pixel (H, W, 2)
    depth: np.ndarray                  # camera-frame depth (mm), nan off-surface
    points: np.ndarray                 # world points (H, W, 3), nan off-surface
    mask: np.ndarray                   # surface hit and lit by the projector

    def truth_phase(self, pitch: float, axis: str = "x") -> np.ndarray:
        i = 0 if axis == "x" else 1
        return np.where(self.mask, TWO_PI * self.proj_xy[..., i] / pitch, np.nan)


def _pixel_grid(cam: CameraModel, supersample: int = 1):
    w, h = cam.image_size
    if supersample == 1:
        vv, uu = np.mgrid[0:h, 0:w]
        return np.column_stack([uu.ravel(), vv.ravel()]).astype(float)
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    vv, uu = np.mgrid[0:h, 0:w]
    pts = []
    for dv in off:
        for du in off:
            pts.append(np.column_stack([uu.ravel() + du, vv.ravel() + dv]))
    return np.concatenate(pts)


def _bilinear(img, x, y):
    """Sample ``img`` at float coords; outside the image returns 0."""
    h, w = img.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    out = np.zeros(len(x))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            out[ok] += (wx * wy)[ok] * img[yi[ok], xi[ok]]
    return out


def surface_geometry(surfaces: Sequence[Surface], cam: CameraModel, pixels):
    """Per-pixel hit points, normals and albedo for camera rays."""
    origin, dirs = cam.rays(pixels)
    t, which = cast(surfaces, origin, dirs)
    hit = np.isfinite(t)
    pts = np.full((len(dirs), 3), np.nan)
    pts[hit] = origin + dirs[hit] * t[hit, None]
    nrm = np.zeros((len(dirs), 3))
    alb = np.zeros(len(dirs))
    for i, s in enumerate(surfaces):
        sel = which == i
        if not np.any(sel):
            continue
        nrm[sel] = s.normals(pts[sel])
        if hasattr(s, "local") and callable(s.albedo):
            alb[sel] = s.albedo_at(s.local(pts[sel]))
        else:
            alb[sel] = s.albedo_at(pts[sel])
    # face normals toward the camera
    flip = np.sum(nrm * dirs, axis=1) > 0
    nrm[flip] *= -1
    return pts, nrm, alb, hit


def render_fringe_views(scene: Scene, patterns: Sequence[np.ndarray], camera: str = "cam1",
                        supersample: int = 1, stream: int = 0) -> FringeCapture:
    """Capture each projector image as seen by ``camera``.

    Intensity is ``albedo * (ambient + cos(theta) * pattern)`` with ``theta``
    the incidence angle of projector light, followed by optional Gaussian
    noise and 8-bit quantization. Pixels whose surface point is occluded from
    the projector receive only ambient light.
    """
    cam = scene.rig.device(camera)
    proj = scene.rig.projector
    w, h = cam.image_size
    ss = supersample
    px = _pixel_grid(cam, ss)
    pts, nrm, alb, hit = surface_geometry(scene.surfaces, cam, px)
    # projector visibility
    lit = hit.copy()
    pp = np.full((len(px), 2), np.nan)
    idx = np.flatnonzero(hit)
    Xd = proj.to_device(pts[idx])
    front = Xd[:, 2] > 0
    idx, Xd = idx[front], Xd[front]
    lit[:] = False
    uv = np.column_stack([proj.fu * Xd[:, 0] / Xd[:, 2] + proj.cu, proj.fv * Xd[:, 1] / Xd[:, 2] + proj.cv])
    inb = proj.in_image(uv)
    idx, uv = idx[inb], uv[inb]
    to_proj = proj.center - pts[idx]
    dist = np.linalg.norm(to_proj, axis=1)
    ldir = to_proj / dist[:, None]
    shading = np.sum(nrm[idx] * ldir, axis=1)
    tp, _ = cast(scene.surfaces, proj.center, -ldir)
    visible = (shading > 0) & (np.abs(tp - dist) < 1e-6 * max(dist.max(initial=1.0), 1.0))
    idx, uv, shading = idx[visible], uv[visible], shading[visible]
    lit[idx] = True
    pp[idx] = uv
    rng = scene.rng(stream)
    sigma = scene.noise.pixel_sigma
    images = []
    for pat in patterns:
        val = np.zeros(len(px))
        val[idx] = shading * _bilinear(np.asarray(pat, float), uv[:, 0], uv[:, 1])
        val = alb * (scene.ambient + val)
        val = np.where(hit, val, 0.0)
        img = val.reshape(ss * ss, h, w).mean(axis=0) if ss > 1 else val.reshape(h, w)
        if sigma > 0:
            img = img + rng.normal(0.0, sigma, img.shape)
        images.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    # truth at pixel centres
    if ss > 1:
        center = _pixel_grid(cam, 1)
        pts_c, _, _, hit_c = surface_geometry(scene.surfaces, cam, center)
        n = len(center)
        # reuse the sub-sample nearest the centre only for odd supersampling
        pp_c = np.full((n, 2), np.nan)
        lit_c = np.zeros(n, bool)
        ok = np.flatnonzero(hit_c)
        Xd = proj.to_device(pts_c[ok])
        good = Xd[:, 2] > 0
        ok, Xd = ok[good], Xd[good]
        uvc = np.column_stack([proj.fu * Xd[:, 0] / Xd[:, 2] + proj.cu, proj.fv * Xd[:, 1] / Xd[:, 2] + proj.cv])
        inb = proj.in_image(uvc)
        pp_c[ok[inb]] = uvc[inb]
        lit_c[ok[inb]] = True
        pts, hit, pp, lit = pts_c, hit_c, pp_c, lit_c & hit_c
    depth = np.where(hit, cam.to_device(np.nan_to_num(pts))[:, 2], np.nan)
    return FringeCapture(images, pp.reshape(h, w, 2), depth.reshape(h, w),
                         pts.reshape(h, w, 3), lit.reshape(h, w))


@dataclass
class MarkerViews:
    images: tuple[np.ndarray, np.ndarray]
    centers: tuple[np.ndarray, np.ndarray]     # true projected circle centres (3, 2) per view
    pose: RigidTransform


def _render_marker(cam: CameraModel, pose: RigidTransform, geom: MarkerGeometry, supersample: int,
                   background: float, plate: float, dark: float) -> np.ndarray:
    m = geom.plate_margin + geom.radius
    corners_local = np.array([[-m, -m, 0], [geom.d01 + m, -m, 0], [geom.d01 + m, geom.d02 + m, 0],
                              [-m, geom.d02 + m, 0]])
    corners = pose.apply(corners_local)
    if np.any(cam.to_device(corners)[:, 2] <= 0):
        raise TargetNotVisible("target is behind the camera")
    uv = cam.project_points(corners)
    w, h = cam.image_size
    img = np.full((h, w), background)
    u0, v0 = np.floor(uv.min(axis=0)).astype(int) - 2
    u1, v1 = np.ceil(uv.max(axis=0)).astype(int) + 2
    u0, v0 = max(u0, 0), max(v0, 0)
    u1, v1 = min(u1, w - 1), min(v1, h - 1)
    if u0 >= u1 or v0 >= v1:
        raise TargetNotVisible("target is outside the image")
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    acc = np.zeros(uu.shape)
    n = pose.rotation[:, 2]
    p0 = pose.translation
    inv = pose.inverse()
    centers = geom.centers()[:, :2]
    for dv in off:
        for du in off:
            pix = np.column_stack([(uu + du).ravel(), (vv + dv).ravel()])
            o, d = cam.rays(pix)
            t = ((p0 - o) @ n) / (d @ n)
            loc = inv.apply(o + d * t[:, None])
            on_plate = ((loc[:, 0] >= -m) & (loc[:, 0] <= geom.d01 + m) & (loc[:, 1] >= -m)
                        & (loc[:, 1] <= geom.d02 + m) & (t > 0))
            d2 = np.min(((loc[:, None, :2] - centers[None]) ** 2).sum(-1), axis=1)
            val = np.where(on_plate, np.where(d2 <= geom.radius ** 2, dark, plate), background)
            acc += val.reshape(uu.shape)
    img[v0:v1 + 1, u0:u1 + 1] = acc / supersample ** 2
    return img


def render_marker_views(scene: Scene, pose: RigidTransform, gain: float = 1.0, blur_length: int = 0,
                        supersample: int = 6, stream: int = 1, background: float = 140.0,
                        plate: float = 235.0, dark: float = 25.0) -> MarkerViews:
    """Anti-aliased stereo render of the three-circle target at ``pose``.

    Low light is a multiplicative ``gain``; motion blur is a horizontal box
    kernel of ``blur_length`` pixels.
    """
    geom = scene.marker
    rng = scene.rng(stream)
    imgs, truth = [], []
    for cam in (scene.rig.cam1, scene.rig.cam2):
        img = _render_marker(cam, pose, geom, supersample, background, plate, dark)
        c = cam.project_points(pose.apply(geom.centers()))
        if not np.all(cam.in_image(c, margin=geom.radius)):
            raise TargetNotVisible("circle centre outside the image")
        if blur_length > 1:
            img = ndimage.convolve1d(img, np.ones(blur_length) / blur_length, axis=1, mode="nearest")
        img = img * gain
        if scene.noise.pixel_sigma > 0:
            img = img + rng.normal(0, scene.noise.pixel_sigma, img.shape)
        imgs.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        truth.append(c)
    return MarkerViews(tuple(imgs), tuple(truth), pose)


# -- ultrasound ----------------------------------------------------------------

@dataclass
class CrossWire:
    point: np.ndarray
    slice_thickness: float = 1.0     # elevational beam width (mm)

    def __post_init__(self):
        self.point = np.asarray(self.point, float)


@dataclass
class SurfacePhantom:
    """Echo along the zero set of one or more surfaces' signed distance."""

    surfaces: list[Surface]
    wall_sigma: float = 0.2          # mm


def perturb_pose(T: RigidTransform, rng, rot_sigma_deg: float, trans_sigma: float) -> RigidTransform:
    """Tracking error: rotation-vector and translation noise applied in the world frame."""
    if rot_sigma_deg == 0 and trans_sigma == 0:
        return T
    w = rng.normal(0, np.radians(rot_sigma_deg), 3)
    dt = rng.normal(0, trans_sigma, 3)
    return RigidTransform(rotvec_to_matrix(w) @ T.rotation, T.translation + dt)


def synth_bscan(phantom, probe_pose: RigidTransform, calibration: ProbeCalibration,
                image_size: tuple[int, int] = (321, 408), rng: np.random.Generator | None = None,
                noise=None, timestamp: float = 0.0, spot_sigma: float = 2.0, amplitude: float = 220.0,
                background: float = 12.0) -> tuple[TrackedBScan, np.ndarray | None]:
    """Render one B-scan at the true probe pose; the returned scan carries the tracked pose.

    For a :class:`CrossWire` the truth is the wire's ``(u, v)`` (``None`` and
    a flagged-blank scan if the image plane misses it). For a
    :class:`SurfacePhantom` the truth is ``None``; the scan shows the
    surface cross-sections as bright ridges.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    w, h = image_size
    img_to_world = probe_pose @ calibration.t_T_I
    img = np.full((h, w), background, dtype=float)
    truth = None
    blank = False
    if isinstance(phantom, CrossWire):
        q = img_to_world.inverse().apply(phantom.point)
        u, v = q[0] / calibration.sx, q[1] / calibration.sy
        if abs(q[2]) > phantom.slice_thickness / 2 or not (0 <= u <= w - 1 and 0 <= v <= h - 1):
            blank = True
        else:
            truth = np.array([u, v])
            seg = noise.segmentation_sigma if noise is not None else 0.0
            cu, cv = truth + (rng.normal(0, seg, 2) if seg > 0 else 0.0)
            vv, uu = np.mgrid[0:h, 0:w]
            img += amplitude * np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2 * spot_sigma ** 2))
    elif isinstance(phantom, SurfacePhantom):
        vv, uu = np.mgrid[0:h, 0:w]
        q = np.column_stack([uu.ravel() * calibration.sx, vv.ravel() * calibration.sy, np.zeros(uu.size)])
        Xw = img_to_world.apply(q)
        ridge = np.zeros(len(Xw))
        for s in phantom.surfaces:
            sd = s.signed_distance(Xw)
            ridge = np.maximum(ridge, np.exp(-0.5 * (sd / phantom.wall_sigma) ** 2))
        img += amplitude * ridge.reshape(h, w)
        blank = not np.any(ridge > 0.5)
    else:
        raise DegenerateInput(f"unsupported phantom {type(phantom).__name__}")
    sp = noise.speckle_sigma if noise is not None else 0.0
    if sp > 0:
        img *= np.exp(rng.normal(-0.5 * sp ** 2, sp, img.shape))
    tracked = probe_pose
    if noise is not None:
        tracked = perturb_pose(probe_pose, rng, noise.pose_sigma_rot_deg, noise.pose_sigma_trans)
    scan = TrackedBScan(np.clip(np.rint(img), 0, 255).astype(np.uint8), tracked, timestamp, blank=blank)
    return scan, truth
