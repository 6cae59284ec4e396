"""Named experiment protocols: scene layouts, sweeps, and on-disk datasets.

Dataset layout (per dataset directory)::

    patterns/       projector images (PGM)
    cam1/, cam2/    captured images (fringe captures, or marker frames of a sweep)
    bscans/         tracked B-scans (PGM)
    poses.txt       frame id + 12 pose numbers (rotation row-major, translation)
    meta.txt        acquisition parameters (key = value)
    truth/          ground-truth sidecars (key = value)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import DegenerateInput, TargetNotVisible
from ..geometry import RigidTransform, rotvec_to_matrix
from ..io import camera_to_kv, transform_to_kv, write_kv, write_pgm, write_poses, write_table
from ..markerpose import MarkerGeometry
from ..slcodec import generate_patterns
from ..usfreehand import ProbeCalibration, TrackedBScan, calibration_to_kv, save_scans
from .render import CrossWire, FringeCapture, SurfacePhantom, render_fringe_views, render_marker_views, synth_bscan
from .scene import Cylinder, NoiseModel, Plane, Rig, Scene, Sphere, Superellipsoid, default_rig

PROTOCOLS = ("probe-calib-5x30", "plane-5poses", "sphere", "concentric-cylinders", "breast-analog", "calib-board")

US_IMAGE_SIZE = (321, 408)
US_DEPTH_MM = 50.0
# probe frame {T} faces the cameras: its z axis points back toward camera 1
PROBE_BASE = np.diag([1.0, -1.0, -1.0])
# image u along T.x, image v (depth) along -T.z
IMAGE_TO_PROBE_BASE = np.array([[1.0, 0, 0], [0, 0, 1], [0, -1, 0]])
# sweep orientation for slices perpendicular to world x
SLICE_BASE = np.column_stack([[0.0, 1, 0], [1.0, 0, 0], [0.0, 0, -1]])


PLANE_POSES = ((670.0, 6.0, 0.0), (700.0, -8.0, 0.0), (690.0, 0.0, 9.0), (672.0, 0.0, -14.0), (650.0, 5.0, 20.0))
SPHERE_RADIUS = 19.8
OUTER_RADIUS = 30.0
INNER_RADIUS = 15.82 / 2
TUMORS = (((-25.0, 0.0, 693.0), 13.5), ((18.0, -8.0, 690.0), 7.0), ((22.0, 9.0, 698.0), 6.0))


@dataclass
class ProtocolConfig:
    scale: float = 1.0           # image-size / focal-length factor for the SL rig
    noise: str = "reference"     # "reference" or "none"
    steps: int = 8
    pitch: float = 18.0
    bits: int = 7
    frames: int = 30
    calibrations: int = 5
    slices: int = 94
    board_poses: int = 34
    render_markers: bool = False
    supersample: int = 1

    @classmethod
    def from_kv(cls, d) -> "ProtocolConfig":
        names = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k in names:
                kw[k] = v
        cfg = cls(**kw)
        if cfg.noise not in ("reference", "none"):
            raise DegenerateInput(f"noise must be 'reference' or 'none', got {cfg.noise!r}")
        return cfg

    def noise_model(self) -> NoiseModel:
        return NoiseModel.reference() if self.noise == "reference" else NoiseModel()


@dataclass
class SweepFrame:
    scan: TrackedBScan
    true_pose: RigidTransform
    stereo: tuple[np.ndarray, np.ndarray] | None = None
    truth_uv: np.ndarray | None = None


@dataclass
class SweepRecording:
    frames: list[SweepFrame]
    name: str = ""

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.scan.timestamp for f in self.frames])

    @property
    def scans(self) -> list[TrackedBScan]:
        return [f.scan for f in self.frames]


@dataclass
class ProtocolRun:
    name: str
    recordings: list[SweepRecording] = field(default_factory=list)
    captures: dict[str, FringeCapture] = field(default_factory=dict)
    truth: dict = field(default_factory=dict)
    directory: Path | None = None
    observations: list = field(default_factory=list)


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def truth_probe_calibration() -> ProbeCalibration:
    R = IMAGE_TO_PROBE_BASE @ rotvec_to_matrix(np.radians([3.0, -2.0, 4.0]))
    s = US_DEPTH_MM / US_IMAGE_SIZE[1]
    return ProbeCalibration(RigidTransform(R, [-25.0, -50.0, -120.0]), s, s)


def pose_through(cal: ProbeCalibration, R_WT, uv, target) -> RigidTransform:
    """Probe pose with orientation ``R_WT`` whose image pixel ``uv`` lands on ``target``."""
    q = cal.to_probe(uv)[0]
    return RigidTransform(R_WT, np.asarray(target, float) - R_WT @ q)


def _marker_visible(rig: Rig, pose: RigidTransform, geom: MarkerGeometry) -> bool:
    X = pose.apply(geom.centers())
    for cam in (rig.cam1, rig.cam2):
        if np.any(cam.to_device(X)[:, 2] <= 0) or not np.all(cam.in_image(cam.project_points(X), margin=60)):
            return False
        # the target must face the camera
        if (cam.center - pose.translation) @ pose.rotation[:, 2] <= 0:
            return False
    return True


def probe_sweep(n: int, rng, cal: ProbeCalibration, point, rig: Rig, geom: MarkerGeometry,
                spread_deg: float = 20.0) -> list[RigidTransform]:
    """Random probe poses imaging ``point`` from varied orientations, target in view."""
    out = []
    while len(out) < n:
        R = rotvec_to_matrix(rng.normal(0.0, np.radians(spread_deg), 3)) @ PROBE_BASE
        uv = rng.uniform([30.0, 40.0], [US_IMAGE_SIZE[0] - 30.0, US_IMAGE_SIZE[1] - 40.0])
        T = pose_through(cal, R, uv, point)
        if _marker_visible(rig, T, geom):
            out.append(T)
    return out


def slice_sweep(xs, rng, cal: ProbeCalibration, center_yz, uv_center, tilt_deg: float = 5.0) -> list[RigidTransform]:
    """Slices roughly perpendicular to world x, pixel ``uv_center`` on the line (x, *center_yz)."""
    out = []
    for x in xs:
        tilt = rotvec_to_matrix(np.radians(rng.uniform(-tilt_deg, tilt_deg, 3)))
        out.append(pose_through(cal, tilt @ SLICE_BASE, uv_center, [x, *center_yz]))
    return out


def _record(phantom, poses, cal, noise, rng, scene: Scene | None = None, stereo: bool = False,
            fps: float = 30.0) -> SweepRecording:
    frames = []
    for i, T in enumerate(poses):
        scan, uv = synth_bscan(phantom, T, cal, US_IMAGE_SIZE, rng=rng, noise=noise, timestamp=i / fps)
        views = None
        if stereo:
            views = render_marker_views(scene, T, stream=10_000 + i).images
        frames.append(SweepFrame(scan, T, views, uv))
    return SweepRecording(frames)


def sl_patterns(cfg: ProtocolConfig, projector_size, axis: str = "x") -> dict[str, np.ndarray]:
    """Phase-shift, complementary gray code, white/black and centre-line images by file stem."""
    out = {}
    ps = generate_patterns("phase_shift", projector_size, steps=cfg.steps, pitch=cfg.pitch, axis=axis)
    gc = generate_patterns("gray_code", projector_size, bits=cfg.bits, pitch=cfg.pitch, axis=axis,
                           complementary=True)
    for i, im in enumerate(ps.images):
        out[f"ps_{i:02d}"] = im
    for i, im in enumerate(gc.images):
        out[f"gray_{i:02d}"] = im
    out["white"] = generate_patterns("white", projector_size).images[0]
    out["black"] = generate_patterns("black", projector_size).images[0]
    if axis == "x":
        cl = generate_patterns("centerline", projector_size, axis=axis)
        out["centerline"] = cl.images[0]
    return out


def sl_meta(cfg: ProtocolConfig, projector_size) -> dict:
    w, _ = projector_size
    return {"steps": cfg.steps, "pitch": cfg.pitch, "bits": cfg.bits, "complementary": True,
            "centerline_center": float(w // 2)}


def capture_sl(scene: Scene, cfg: ProtocolConfig, stream: int = 0) -> tuple[dict, FringeCapture]:
    pats = sl_patterns(cfg, scene.rig.projector.image_size)
    cap = render_fringe_views(scene, list(pats.values()), "cam1", supersample=cfg.supersample, stream=stream)
    return dict(zip(pats, cap.images)), cap


def write_sl_dataset(directory: Path, cfg: ProtocolConfig, scene: Scene, images: dict,
                     write_patterns: bool = True) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    if write_patterns:
        (directory / "patterns").mkdir(exist_ok=True)
        for k, im in sl_patterns(cfg, scene.rig.projector.image_size).items():
            write_pgm(directory / "patterns" / f"{k}.pgm", im)
    (directory / "cam1").mkdir(exist_ok=True)
    for k, im in images.items():
        write_pgm(directory / "cam1" / f"{k}.pgm", im)
    write_kv(directory / "meta.txt", sl_meta(cfg, scene.rig.projector.image_size), ["structured-light capture"])
    write_rig(directory / "truth" / "rig.txt", scene.rig)


def write_rig(path: Path, rig: Rig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    d = {"reference": "cam1"}
    for n in ("cam1", "cam2", "projector"):
        d.update(camera_to_kv(n, rig.device(n)))
    write_kv(path, d, ["device models (pose: device -> world)"])


def _save_recording(directory: Path, rec: SweepRecording, truth: dict, rig: Rig | None = None) -> None:
    save_scans(directory, rec.scans, US_DEPTH_MM)
    (directory / "truth").mkdir(exist_ok=True)
    write_poses(directory / "truth" / "poses_true.txt", [f.true_pose for f in rec.frames])
    uv = [(i, *f.truth_uv) for i, f in enumerate(rec.frames) if f.truth_uv is not None]
    if uv:
        write_table(directory / "truth" / "segmentation.txt", "frame u v", uv)
    if any(f.stereo is not None for f in rec.frames):
        for cam in ("cam1", "cam2"):
            (directory / cam).mkdir(exist_ok=True)
        for i, f in enumerate(rec.frames):
            write_pgm(directory / "cam1" / f"frame_{i:04d}.pgm", f.stereo[0])
            write_pgm(directory / "cam2" / f"frame_{i:04d}.pgm", f.stereo[1])
        if rig is not None:
            write_rig(directory / "truth" / "rig.txt", rig)
    write_kv(directory / "truth" / "truth.txt", truth, ["ground truth"])


# -- protocols -------------------------------------------------------------------

def _probe_calib(cfg, seed, out):
    rig = default_rig()
    geom = MarkerGeometry()
    cal = truth_probe_calibration()
    point = np.array([10.0, 5.0, 650.0])
    noise = cfg.noise_model()
    scene = Scene([], rig, geom, noise, seed)
    run = ProtocolRun("probe-calib-5x30")
    truth = calibration_to_kv(cal)
    truth.update({"phantom.cross_point": point, "noise": cfg.noise, "image.width": US_IMAGE_SIZE[0],
                  "image.height": US_IMAGE_SIZE[1], "depth_mm": US_DEPTH_MM})
    for k in range(cfg.calibrations):
        rng = _rng(seed, 1, k)
        poses = probe_sweep(cfg.frames, rng, cal, point, rig, geom)
        rec = _record(CrossWire(point), poses, cal, noise, rng, scene, cfg.render_markers)
        rec.name = f"cal_{k}"
        run.recordings.append(rec)
        if out is not None:
            _save_recording(out / rec.name, rec, truth, rig)
    run.truth = truth
    return run


def plane_pose(center_z, tilt_x_deg, tilt_y_deg) -> RigidTransform:
    R = rotvec_to_matrix(np.radians([tilt_x_deg, 0, 0])) @ rotvec_to_matrix(np.radians([0, tilt_y_deg, 0]))
    return RigidTransform(R, [0.0, 0.0, center_z])


def _sl_rig(cfg):
    return default_rig(scale=cfg.scale)


def _plane(cfg, seed, out):
    rig = _sl_rig(cfg)
    run = ProtocolRun("plane-5poses")
    for k, (z, ax, ay) in enumerate(PLANE_POSES):
        plane = Plane(plane_pose(z, ax, ay))
        scene = Scene([plane], rig, noise=NoiseModel(pixel_sigma=cfg.noise_model().pixel_sigma), seed=seed)
        images, cap = capture_sl(scene, cfg, stream=k)
        run.captures[f"pose_{k}"] = cap
        truth = {"surface": "plane", "plane.normal": plane.normal,
                 "plane.offset": float(plane.normal @ plane.pose.translation), "plane.size": plane.size}
        run.truth[f"pose_{k}"] = truth
        if out is not None:
            write_sl_dataset(out / f"pose_{k}", cfg, scene, images)
            write_kv(out / f"pose_{k}" / "truth" / "truth.txt", truth, ["ground truth"])
    return run


def _sphere(cfg, seed, out):
    rig = _sl_rig(cfg)
    center = np.array([0.0, 0.0, 680.0])
    scene = Scene([Sphere(center, SPHERE_RADIUS)], rig, noise=NoiseModel(pixel_sigma=cfg.noise_model().pixel_sigma),
                  seed=seed)
    images, cap = capture_sl(scene, cfg)
    truth = {"surface": "sphere", "sphere.center": center, "sphere.radius": SPHERE_RADIUS}
    run = ProtocolRun("sphere", captures={"sphere": cap}, truth=truth)
    if out is not None:
        write_sl_dataset(out, cfg, scene, images)
        write_kv(out / "truth" / "truth.txt", truth, ["ground truth"])
    return run


def _cylinders(cfg, seed, out):
    rig = _sl_rig(cfg)
    axis_point = np.array([0.0, 0.0, 700.0])
    outer = Cylinder(axis_point, [1.0, 0, 0], OUTER_RADIUS, length=120.0)
    inner = Cylinder(axis_point, [1.0, 0, 0], INNER_RADIUS, length=120.0)
    noise = cfg.noise_model()
    scene = Scene([outer], rig, noise=NoiseModel(pixel_sigma=noise.pixel_sigma), seed=seed)
    images, cap = capture_sl(scene, cfg)
    cal = truth_probe_calibration()
    rng = _rng(seed, 2)
    xs = (np.arange(cfg.slices) - (cfg.slices - 1) / 2) * 1.0
    poses = slice_sweep(xs, rng, cal, axis_point[1:], (US_IMAGE_SIZE[0] / 2, 250.0))
    rec = _record(SurfacePhantom([inner]), poses, cal, noise, rng)
    rec.name = "us"
    truth = {"surface": "concentric-cylinders", "cylinder.axis_point": axis_point, "cylinder.axis": outer.axis,
             "cylinder.outer_radius": OUTER_RADIUS, "cylinder.inner_radius": INNER_RADIUS,
             "cylinder.gap": OUTER_RADIUS - INNER_RADIUS, "noise": cfg.noise}
    run = ProtocolRun("concentric-cylinders", [rec], {"outer": cap}, truth)
    if out is not None:
        write_sl_dataset(out / "sl", cfg, scene, images)
        _save_recording(out / "us", rec, truth)
        write_kv(out / "us" / "truth" / "probe.txt", calibration_to_kv(cal), ["probe calibration"])
        write_kv(out / "truth.txt", truth, ["ground truth"])
    return run


def breast_pose() -> RigidTransform:
    """Dome base at z = 720 mm, apex toward the cameras."""
    return RigidTransform(np.diag([1.0, -1.0, -1.0]), [0.0, 0.0, 720.0])


def _breast(cfg, seed, out):
    rig = _sl_rig(cfg)
    dome = Superellipsoid(breast_pose())
    noise = cfg.noise_model()
    scene = Scene([dome], rig, noise=NoiseModel(pixel_sigma=noise.pixel_sigma), seed=seed)
    images, cap = capture_sl(scene, cfg)
    tumors = [Sphere(c, r) for c, r in TUMORS]
    cal = truth_probe_calibration()
    rng = _rng(seed, 3)
    xs = np.arange(-42.0, 38.0, 1.0)
    poses = slice_sweep(xs, rng, cal, (0.0, 690.0), (US_IMAGE_SIZE[0] / 2, 204.0), tilt_deg=3.0)
    rec = _record(SurfacePhantom(tumors), poses, cal, noise, rng)
    rec.name = "us"
    truth = {"surface": "breast-analog", "dome.semi_axes": dome.semi_axes, "dome.exponent": dome.exponent,
             "noise": cfg.noise}
    truth.update(transform_to_kv("dome.pose", dome.pose))
    for i, (c, r) in enumerate(TUMORS):
        truth[f"tumor{i}.center"] = c
        truth[f"tumor{i}.radius"] = r
    run = ProtocolRun("breast-analog", [rec], {"dome": cap}, truth)
    if out is not None:
        write_sl_dataset(out / "sl", cfg, scene, images)
        _save_recording(out / "us", rec, truth)
        write_kv(out / "us" / "truth" / "probe.txt", calibration_to_kv(cal), ["probe calibration"])
        write_kv(out / "truth.txt", truth, ["ground truth"])
    return run


def board_poses(n: int, rng, rig: Rig, board, margin: float = 20.0) -> list[RigidTransform]:
    """Random board poses (board normal away from the cameras) seen whole by all three devices."""
    out = []
    while len(out) < n:
        R = rotvec_to_matrix(np.radians(rng.uniform(-50, 50, 3) * [1.0, 1.0, 0.5]))
        c = np.array([rng.uniform(-60, 60), rng.uniform(-40, 40), rng.uniform(550, 800)])
        T = RigidTransform(R, c - R @ board.center)
        X = T.apply(board.points)
        ok = True
        for d in (rig.cam1, rig.cam2, rig.projector):
            if np.any(d.to_device(X)[:, 2] <= 0) or not d.in_image(d.project_points(X), margin).all():
                ok = False
                break
        if ok:
            out.append(T)
    return out


def board_observations(rig: Rig, board, poses, sigma: float, rng) -> list:
    """Projected board points for cam1, cam2 and the projector with Gaussian pixel noise."""
    from ..calib import ViewObservation
    obs = []
    for name in ("cam1", "cam2", "projector"):
        dev = rig.device(name)
        for i, T in enumerate(poses):
            uv = dev.project_points(T.apply(board.points))
            if sigma > 0:
                uv = uv + rng.normal(0.0, sigma, uv.shape)
            obs.append(ViewObservation(uv, name, i))
    return obs


def board_surface(board, pose: RigidTransform) -> Plane:
    """Plane carrying the board's dark discs; ``pose`` maps board coordinates to world."""
    from .scene import circle_grid_albedo
    shade = circle_grid_albedo(board.points, board.radius)
    return Plane(pose @ RigidTransform(np.eye(3), board.center),
                 size=(float(np.ptp(board.points[:, 0])) + 4 * board.radius,
                       float(np.ptp(board.points[:, 1])) + 4 * board.radius),
                 albedo=lambda local: shade(local + board.center))


def render_board_view(rig: Rig, board, pose: RigidTransform, camera: str = "cam1", light: float = 240.0,
                      sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    """Image of the circle board under uniform light, as seen by ``camera``."""
    scene = Scene([board_surface(board, pose)], rig, noise=NoiseModel(pixel_sigma=sigma), seed=seed, ambient=light)
    dark = np.zeros((rig.projector.height, rig.projector.width))
    return render_fringe_views(scene, [dark], camera).images[0]


def write_observations(path: Path, observations) -> None:
    rows = []
    for o in observations:
        for pid, (u, v) in zip(o.point_ids, o.board_points):
            rows.append((o.pose_index, pid, u, v))
    write_table(path, "pose point u v", rows)


def _calib_board(cfg, seed, out):
    from ..calib import CalibrationBoard
    rig = default_rig()
    board = CalibrationBoard()
    rng = _rng(seed, 4)
    poses = board_poses(cfg.board_poses, rng, rig, board)
    sigma = cfg.noise_model().observation_sigma
    obs = board_observations(rig, board, poses, sigma, rng)
    truth = {"board.rows": board.rows, "board.cols": board.cols, "board.spacing": board.spacing,
             "board.radius": board.radius, "observation_sigma": sigma, "poses": len(poses)}
    run = ProtocolRun("calib-board", truth=truth, observations=obs)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "observations").mkdir(exist_ok=True)
        for name in ("cam1", "cam2", "projector"):
            write_observations(out / "observations" / f"{name}.txt", [o for o in obs if o.device == name])
        (out / "truth").mkdir(exist_ok=True)
        write_poses(out / "truth" / "board_poses.txt", poses)
        write_rig(out / "truth" / "rig.txt", rig)
        sizes = {f"{n}.width": rig.device(n).width for n in ("cam1", "cam2", "projector")}
        sizes.update({f"{n}.height": rig.device(n).height for n in ("cam1", "cam2", "projector")})
        write_kv(out / "meta.txt", {**truth, **sizes}, ["calibration board dataset"])
    return run


_RUNNERS = {
    "probe-calib-5x30": _probe_calib,
    "plane-5poses": _plane,
    "sphere": _sphere,
    "concentric-cylinders": _cylinders,
    "breast-analog": _breast,
    "calib-board": _calib_board,
}


def run_protocol(name: str, out_dir=None, seed: int = 0, config: ProtocolConfig | None = None) -> ProtocolRun:
    """Simulate a named experiment; with ``out_dir`` also write its datasets."""
    if name not in _RUNNERS:
        raise DegenerateInput(f"unknown protocol {name!r}; choose from {', '.join(PROTOCOLS)}")
    cfg = config or ProtocolConfig()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    run = _RUNNERS[name](cfg, seed, out)
    run.directory = out
    if out is not None:
        write_kv(out / "protocol.txt", {"protocol": name, "seed": seed, **asdict(cfg)}, ["simulated dataset"])
    return run
