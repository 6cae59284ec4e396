"""Planar-target calibration of cameras and of the projector as an inverse camera.

Pipeline: per-view homographies, closed-form zero-skew intrinsics, per-view
board poses, then Levenberg-Marquardt over intrinsics and poses. Two devices
seeing the same board views are refined jointly with their relative pose.
Poses stored per view map board coordinates to the reference device frame.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateInput, IllConditioned, NonConvergence
from .geometry import CameraModel, RigidTransform, matrix_to_rotvec, nearest_rotation, rotvec_to_matrix, skew
from .lm import levenberg_marquardt
from .slcodec import PhaseMap, TWO_PI


@dataclass(frozen=True)
class CalibrationBoard:
    """Asymmetric circle grid: point (i, j) sits at ((2j + i % 2) * s, i * s, 0)."""

    rows: int = 11
    cols: int = 4
    spacing: float = 20.0
    radius: float = 6.0

    @property
    def points(self) -> np.ndarray:
        i, j = np.divmod(np.arange(self.rows * self.cols), self.cols)
        return np.column_stack([(2 * j + i % 2) * self.spacing, i * self.spacing, np.zeros(len(i))])

    @property
    def center(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def __len__(self):
        return self.rows * self.cols


@dataclass
class ViewObservation:
    board_points: np.ndarray           # (n, 2) pixels
    device: str
    pose_index: int
    point_ids: np.ndarray | None = None  # indices into the board grid; None means all, in order

    def __post_init__(self):
        self.board_points = np.asarray(self.board_points, float).reshape(-1, 2)
        if self.point_ids is None:
            self.point_ids = np.arange(len(self.board_points))
        self.point_ids = np.asarray(self.point_ids, int)
        if len(self.point_ids) != len(self.board_points):
            raise DegenerateInput("point ids and pixels differ in length")
        if not np.all(np.isfinite(self.board_points)):
            raise DegenerateInput("non-finite observation")


# -- closed-form initialisation ------------------------------------------------

def _hartley(P):
    c = P.mean(axis=0)
    d = np.mean(np.linalg.norm(P - c, axis=1))
    if d <= 0:
        raise DegenerateInput("coincident points")
    s = np.sqrt(2) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def estimate_homography(board_xy, image_uv) -> np.ndarray:
    """Normalized DLT homography mapping board (x, y) to pixels, scaled to unit Frobenius norm."""
    X = np.asarray(board_xy, float)[:, :2]
    U = np.asarray(image_uv, float)
    if len(X) < 4 or len(X) != len(U):
        raise DegenerateInput("homography needs at least 4 correspondences")
    for P in (X, U):
        s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
        if s[1] <= 1e-9 * s[0]:
            raise DegenerateInput("points are collinear")
    Tx, Tu = _hartley(X), _hartley(U)
    xh = np.column_stack([X, np.ones(len(X))]) @ Tx.T
    uh = np.column_stack([U, np.ones(len(U))]) @ Tu.T
    z = np.zeros((len(X), 3))
    A = np.vstack([np.hstack([xh, z, -uh[:, :1] * xh]), np.hstack([z, xh, -uh[:, 1:2] * xh])])
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-10 * s[0]:
        raise DegenerateInput("rank-deficient homography system")
    H = np.linalg.inv(Tu) @ vt[-1].reshape(3, 3) @ Tx
    H /= np.linalg.norm(H)
    return H if H[2, 2] >= 0 else -H


def _conic_row(H, i, j):
    a, b = H[:, i], H[:, j]
    # coefficients of b = (B11, B22, B13, B23, B33), skew term dropped
    return np.array([a[0] * b[0], a[1] * b[1], a[2] * b[0] + a[0] * b[2], a[2] * b[1] + a[1] * b[2], a[2] * b[2]])


def intrinsics_from_homographies(Hs: Sequence[np.ndarray], image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Zero-skew intrinsic matrix from the image of the absolute conic."""
    if len(Hs) < 3:
        raise DegenerateInput("need at least 3 homographies")
    if image_size is None:
        scale = max(max(abs(H[0, 2] / H[2, 2]), abs(H[1, 2] / H[2, 2])) for H in Hs)
        w = h = max(2 * scale, 1.0)
    else:
        w, h = image_size
    # work in pixel coordinates scaled to roughly [-1, 1]
    N = np.array([[2.0 / w, 0, -1.0], [0, 2.0 / w, -h / w], [0, 0, 1.0]])
    rows = []
    for H in Hs:
        Hn = N @ H
        rows.append(_conic_row(Hn, 0, 1))
        rows.append(_conic_row(Hn, 0, 0) - _conic_row(Hn, 1, 1))
    V = np.array(rows)
    _, s, vt = np.linalg.svd(V)
    if s[-2] <= 0 or s[0] / s[-2] > 1e12:
        raise IllConditioned("view orientations do not constrain the intrinsics")
    b = vt[-1]
    if b[0] < 0:
        b = -b
    B11, B22, B13, B23, B33 = b
    if B11 <= 0 or B22 <= 0:
        raise IllConditioned("absolute conic estimate is not positive definite")
    u0, v0 = -B13 / B11, -B23 / B22
    lam = B33 - B13 ** 2 / B11 - B23 ** 2 / B22
    if lam <= 0:
        raise IllConditioned("absolute conic estimate is not positive definite")
    Kn = np.array([[np.sqrt(lam / B11), 0, u0], [0, np.sqrt(lam / B22), v0], [0, 0, 1.0]])
    return np.linalg.inv(N) @ Kn


def pose_from_homography(K, H) -> RigidTransform:
    """Board-to-device pose; the board ends up in front of the device."""
    A = np.linalg.solve(K, H)
    lam = 2.0 / (np.linalg.norm(A[:, 0]) + np.linalg.norm(A[:, 1]))
    if A[2, 2] < 0:
        lam = -lam
    r1, r2, t = lam * A[:, 0], lam * A[:, 1], lam * A[:, 2]
    R = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    return RigidTransform(R, t)


# -- nonlinear refinement --------------------------------------------------------

@dataclass
class CalibrationResult:
    devices: dict[str, CameraModel]          # poses relative to the reference device
    view_poses: dict[int, RigidTransform]    # board -> reference device
    rms: dict[str, float]                    # per-device reprojection RMS (px)
    view_rms: dict[tuple[str, int], float]
    cost_history: list[float] = field(default_factory=list)
    iterations: int = 0
    reference: str = "cam1"
    diagnostics: dict = field(default_factory=dict)

    @property
    def total_rms(self) -> float:
        return float(np.sqrt(np.mean([v ** 2 for v in self.rms.values()])))


def _project_jac(fu, fv, Xc):
    """Pixels and d(pixel)/d(camera point) for zero-skew pinhole projection."""
    z = Xc[:, 2]
    x, y = Xc[:, 0] / z, Xc[:, 1] / z
    J = np.zeros((len(Xc), 2, 3))
    J[:, 0, 0] = fu / z
    J[:, 0, 2] = -fu * x / z
    J[:, 1, 1] = fv / z
    J[:, 1, 2] = -fv * y / z
    return x, y, J


def refine_lm(devices: Mapping[str, CameraModel], view_poses: Mapping[int, RigidTransform],
              board: CalibrationBoard, observations: Sequence[ViewObservation],
              reference: str | None = None, max_iter: int = 200) -> CalibrationResult:
    """Minimize total squared reprojection error over intrinsics, view poses
    and (for non-reference devices) the reference-to-device transform.

    ``devices[name].pose`` is read as device -> reference; the reference
    device's own pose is ignored and reported as identity.
    """
    names = list(devices)
    reference = reference or names[0]
    others = [n for n in names if n != reference]
    views = sorted({o.pose_index for o in observations})
    if not observations:
        raise DegenerateInput("no observations")
    missing = [v for v in views if v not in view_poses]
    if missing:
        raise DegenerateInput(f"no initial pose for views {missing}")
    if any(o.device not in devices for o in observations):
        raise DegenerateInput("observation for an unknown device")
    di = {n: i for i, n in enumerate(names)}
    oi = {n: len(names) * 4 + 6 * i for i, n in enumerate(others)}
    vbase = len(names) * 4 + 6 * len(others)
    vi = {v: vbase + 6 * i for i, v in enumerate(views)}
    n_par = vbase + 6 * len(views)

    x0 = np.zeros(n_par)
    for n, cam in devices.items():
        x0[4 * di[n]:4 * di[n] + 4] = (cam.fu, cam.fv, cam.cu, cam.cv)
    for n in others:
        M = devices[n].pose.inverse()
        x0[oi[n]:oi[n] + 6] = np.concatenate([M.rotvec, M.translation])
    for v in views:
        x0[vi[v]:vi[v] + 6] = np.concatenate([view_poses[v].rotvec, view_poses[v].translation])

    rot_slots = [oi[n] for n in others] + [vi[v] for v in views]

    def retract(x, dx):
        out = x + dx
        for k in rot_slots:
            out[k:k + 3] = matrix_to_rotvec(rotvec_to_matrix(dx[k:k + 3]) @ rotvec_to_matrix(x[k:k + 3]))
        return out

    grid = board.points
    obs_X = [grid[o.point_ids] for o in observations]
    obs_u = [o.board_points for o in observations]
    n_res = 2 * sum(len(u) for u in obs_u)

    def residual(x):
        out = []
        for o, X, u in zip(observations, obs_X, obs_u):
            k = vi[o.pose_index]
            Xc = X @ rotvec_to_matrix(x[k:k + 3]).T + x[k + 3:k + 6]
            if o.device != reference:
                m = oi[o.device]
                Xc = Xc @ rotvec_to_matrix(x[m:m + 3]).T + x[m + 3:m + 6]
            fu, fv, cu, cv = x[4 * di[o.device]:4 * di[o.device] + 4]
            out.append(np.column_stack([fu * Xc[:, 0] / Xc[:, 2] + cu, fv * Xc[:, 1] / Xc[:, 2] + cv]) - u)
        return np.concatenate(out).ravel()

    def jacobian(x):
        J = np.zeros((n_res, n_par))
        row = 0
        for o, X in zip(observations, obs_X):
            n = len(X)
            k = vi[o.pose_index]
            Rv = rotvec_to_matrix(x[k:k + 3])
            RX = X @ Rv.T
            Xc1 = RX + x[k + 3:k + 6]
            d = 4 * di[o.device]
            fu, fv = x[d], x[d + 1]
            if o.device != reference:
                m = oi[o.device]
                Rm = rotvec_to_matrix(x[m:m + 3])
                RmX = Xc1 @ Rm.T
                Xc = RmX + x[m + 3:m + 6]
            else:
                Rm = np.eye(3)
                Xc = Xc1
            px, py, Jp = _project_jac(fu, fv, Xc)
            block = np.zeros((n, 2, n_par))
            block[:, 0, d] = px
            block[:, 1, d + 1] = py
            block[:, 0, d + 2] = 1.0
            block[:, 1, d + 3] = 1.0
            JpR = Jp @ Rm                                # d pixel / d Xc1
            block[:, :, k:k + 3] = -np.einsum("nij,njk->nik", JpR, np.array([skew(p) for p in RX]))
            block[:, :, k + 3:k + 6] = JpR
            if o.device != reference:
                block[:, :, m:m + 3] = -np.einsum("nij,njk->nik", Jp, np.array([skew(p) for p in RmX]))
                block[:, :, m + 3:m + 6] = Jp
            J[row:row + 2 * n] = block.reshape(2 * n, n_par)
            row += 2 * n
        return J

    res = levenberg_marquardt(residual, jacobian, x0, retract=retract, max_iter=max_iter)
    if res.reason == "damping_overflow":
        raise NonConvergence("calibration diverged (damping overflow)")
    x = res.x
    out_devices = {}
    for n, cam in devices.items():
        fu, fv, cu, cv = x[4 * di[n]:4 * di[n] + 4]
        pose = RigidTransform()
        if n != reference:
            pose = RigidTransform(rotvec_to_matrix(x[oi[n]:oi[n] + 3]), x[oi[n] + 3:oi[n] + 6]).inverse()
        if fu <= 0 or fv <= 0 or not (0 <= cu < cam.width and 0 <= cv < cam.height):
            raise NonConvergence(f"{n}: refinement left the valid intrinsic range")
        out_devices[n] = CameraModel(float(fu), float(fv), float(cu), float(cv), cam.image_size, pose)
    poses = {v: RigidTransform(rotvec_to_matrix(x[vi[v]:vi[v] + 3]), x[vi[v] + 3:vi[v] + 6]) for v in views}
    r = residual(x).reshape(-1, 2)
    sq = np.sum(r ** 2, axis=1)
    rms, view_rms, per_dev, row = {}, {}, {n: [] for n in names}, 0
    for o in observations:
        n = len(o.point_ids)
        view_rms[(o.device, o.pose_index)] = float(np.sqrt(np.mean(sq[row:row + n])))
        per_dev[o.device].append(sq[row:row + n])
        row += n
    for n, parts in per_dev.items():
        if parts:
            rms[n] = float(np.sqrt(np.mean(np.concatenate(parts))))
    return CalibrationResult(out_devices, poses, rms, view_rms, res.cost_history, res.iterations, reference,
                             {"reason": res.reason, "converged": res.converged})


def initial_device(board: CalibrationBoard, observations: Sequence[ViewObservation],
                   image_size: tuple[int, int]) -> tuple[CameraModel, dict[int, RigidTransform]]:
    """Closed-form intrinsics and board poses for one device."""
    if len(observations) < 3:
        raise DegenerateInput("need at least 3 views")
    grid = board.points
    Hs = [estimate_homography(grid[o.point_ids], o.board_points) for o in observations]
    K = intrinsics_from_homographies(Hs, image_size)
    w, h = image_size
    cu = float(np.clip(K[0, 2], 0, w - 1))
    cv = float(np.clip(K[1, 2], 0, h - 1))
    cam = CameraModel(float(K[0, 0]), float(K[1, 1]), cu, cv, image_size)
    poses = {o.pose_index: pose_from_homography(cam.K, H) for o, H in zip(observations, Hs)}
    return cam, poses


def calibrate_device(board: CalibrationBoard, observations: Sequence[ViewObservation],
                     image_size: tuple[int, int], name: str | None = None, max_iter: int = 200) -> CalibrationResult:
    name = name or observations[0].device
    obs = [o for o in observations if o.device == name]
    cam, poses = initial_device(board, obs, image_size)
    return refine_lm({name: cam}, poses, board, obs, reference=name, max_iter=max_iter)


# -- stereo ----------------------------------------------------------------------

@dataclass
class StereoEstimate:
    transform: RigidTransform        # device b -> device a
    rotation_spread_deg: float       # RMS angle of per-view estimates about the mean
    translation_spread: float        # RMS distance of per-view translations to the mean (mm)
    n_views: int


def _quaternion_mean(Rs) -> np.ndarray:
    from scipy.spatial.transform import Rotation
    q = Rotation.from_matrix(np.asarray(Rs)).as_quat()
    _, vecs = np.linalg.eigh(q.T @ q)
    return Rotation.from_quat(vecs[:, -1]).as_matrix()


def stereo_extrinsics(poses_a: Mapping[int, RigidTransform], poses_b: Mapping[int, RigidTransform]) -> StereoEstimate:
    """Average the per-view relative poses ``P_a @ inv(P_b)`` (device b -> device a).

    Rotation by the eigenvector quaternion mean, translation by the arithmetic mean.
    """
    shared = sorted(set(poses_a) & set(poses_b))
    if not shared:
        raise DegenerateInput("no views shared by both devices")
    rel = [poses_a[v] @ poses_b[v].inverse() for v in shared]
    R = _quaternion_mean([T.rotation for T in rel])
    t = np.mean([T.translation for T in rel], axis=0)
    ang = np.array([np.degrees(np.linalg.norm(matrix_to_rotvec(T.rotation @ R.T))) for T in rel])
    dist = np.array([np.linalg.norm(T.translation - t) for T in rel])
    return StereoEstimate(RigidTransform(R, t), float(np.sqrt(np.mean(ang ** 2))),
                          float(np.sqrt(np.mean(dist ** 2))), len(shared))


def calibrate_pair(board: CalibrationBoard, observations: Sequence[ViewObservation],
                   image_sizes: Mapping[str, tuple[int, int]], reference: str = "cam1",
                   other: str = "cam2", max_iter: int = 200) -> CalibrationResult:
    """Independent device calibrations, averaged extrinsic, then joint refinement."""
    single = {}
    for n in (reference, other):
        single[n] = calibrate_device(board, observations, image_sizes[n], n, max_iter)
    est = stereo_extrinsics(single[reference].view_poses, single[other].view_poses)
    devices = {reference: single[reference].devices[reference],
               other: single[other].devices[other].with_pose(est.transform)}
    poses = dict(single[other].view_poses)
    poses = {v: est.transform @ p for v, p in poses.items()}
    poses.update(single[reference].view_poses)
    obs = [o for o in observations if o.device in (reference, other)]
    res = refine_lm(devices, poses, board, obs, reference=reference, max_iter=max_iter)
    res.diagnostics.update(rotation_spread_deg=est.rotation_spread_deg, translation_spread=est.translation_spread,
                           shared_views=est.n_views,
                           single_rms={n: single[n].rms[n] for n in single})
    return res


# -- projector correspondences ----------------------------------------------------

def sample_phase(phase: PhaseMap, uv) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear phase at sub-pixel positions; invalid if any of the 4 neighbours is masked."""
    uv = np.asarray(uv, float)
    h, w = phase.values.shape
    u0 = np.floor(uv[:, 0]).astype(int)
    v0 = np.floor(uv[:, 1]).astype(int)
    inside = (u0 >= 0) & (v0 >= 0) & (u0 < w - 1) & (v0 < h - 1)
    u0c, v0c = np.clip(u0, 0, w - 2), np.clip(v0, 0, h - 2)
    fu, fv = uv[:, 0] - u0c, uv[:, 1] - v0c
    m, val = phase.mask, phase.values
    ok = inside & m[v0c, u0c] & m[v0c, u0c + 1] & m[v0c + 1, u0c] & m[v0c + 1, u0c + 1]
    out = ((1 - fu) * (1 - fv) * val[v0c, u0c] + fu * (1 - fv) * val[v0c, u0c + 1]
           + (1 - fu) * fv * val[v0c + 1, u0c] + fu * fv * val[v0c + 1, u0c + 1])
    return out, ok


def projector_correspondences(camera_obs: ViewObservation, phase_x: PhaseMap, phase_y: PhaseMap,
                              pitch_x: float, pitch_y: float | None = None,
                              min_points: int = 4) -> ViewObservation | None:
    """Projector pixels of the board points seen by a camera, from vertical and
    horizontal absolute phase. Points on masked phase are dropped; the view is
    dropped (``None``) when fewer than ``min_points`` remain."""
    pitch_y = pitch_x if pitch_y is None else pitch_y
    px, okx = sample_phase(phase_x, camera_obs.board_points)
    py, oky = sample_phase(phase_y, camera_obs.board_points)
    ok = okx & oky
    if ok.sum() < min_points:
        return None
    uv = np.column_stack([px * pitch_x / TWO_PI, py * pitch_y / TWO_PI])[ok]
    return ViewObservation(uv, "projector", camera_obs.pose_index, camera_obs.point_ids[ok])


# -- board detection in images ------------------------------------------------------

def order_grid(centers, board: CalibrationBoard) -> np.ndarray:
    """Assign board point ids to detected circle centres of an asymmetric grid.

    The centres form a 2D lattice. Labelling starts from the two shortest
    independent steps at the most central centre and grows outward: every
    unlabelled lattice cell next to the labelled set is predicted through a
    homography fitted to the labels so far, and claims the detection closest to
    the prediction. The finished lattice labelling is then matched against the
    board layout. Returns ``ids`` with ``centers[k]`` -> board point ``ids[k]``.
    """
    from scipy.spatial import cKDTree
    C = np.asarray(centers, float)
    n = len(C)
    if n != len(board):
        raise DegenerateInput(f"expected {len(board)} circles, found {n}")
    tree = cKDTree(C)
    start = int(np.argmin(np.linalg.norm(C - C.mean(axis=0), axis=1)))
    _, nn = tree.query(C[start], k=min(9, n))
    steps = C[nn[1:]] - C[start]
    a = steps[0]
    sines = np.abs(a[0] * steps[:, 1] - a[1] * steps[:, 0]) / (np.linalg.norm(steps, axis=1) * np.linalg.norm(a))
    b = steps[int(np.argmax(sines > 0.2))]
    if a[0] * b[1] - a[1] * b[0] < 0:
        b = -b
    A0 = np.column_stack([a, b])
    cell_of = {start: (0, 0)}
    owner = {(0, 0): start}
    while len(cell_of) < n:
        cells = np.array(list(owner), float)
        pts = C[list(owner.values())]
        H = None
        if len(cells) >= 6:
            try:
                H = estimate_homography(cells, pts)
            except DegenerateInput:
                H = None
        frontier = {}
        for (p, q), k in owner.items():
            for dp, dq in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                f = (p + dp, q + dq)
                if f not in owner:
                    frontier.setdefault(f, k)
        if not frontier:
            break
        F = np.array(list(frontier), float)
        if H is None:
            pred = C[start] + F @ A0.T
        else:
            ph = np.column_stack([F, np.ones(len(F))]) @ H.T
            pred = ph[:, :2] / ph[:, 2:3]
        claims = {}
        for f, x in zip(frontier, pred):
            tol = 0.35 * np.linalg.norm(x - C[frontier[f]])
            d, j = tree.query(x)
            if d < tol and j not in cell_of:
                claims.setdefault(int(j), []).append(f)
        grown = False
        for j, fs in claims.items():
            if len(fs) == 1:
                cell_of[j] = fs[0]
                owner[fs[0]] = j
                grown = True
        if not grown:
            break
    if len(cell_of) != n:
        raise DegenerateInput("could not link all circles into one grid")
    pq = np.array([cell_of[k] for k in range(n)])
    pq -= pq.min(axis=0)
    grid = np.rint(board.points[:, :2] / board.spacing).astype(int)
    index = {tuple(g): k for k, g in enumerate(grid)}
    matches = []
    # any same-handed lattice basis: integer maps of determinant 2 onto the board's diagonal lattice
    base = np.array([[1, 1], [-1, 1]])
    for e in itertools.product(range(-2, 3), repeat=4):
        U = np.array(e).reshape(2, 2)
        if round(np.linalg.det(U)) != 1:
            continue
        xy = pq @ (U @ base)
        for off in {tuple(g - xy[0]) for g in grid}:
            cand = [index.get((int(x + off[0]), int(y + off[1]))) for x, y in xy]
            if None not in cand and len(set(cand)) == n:
                matches.append(np.array(cand))
    unique = {tuple(m) for m in matches}
    if len(unique) != 1:
        raise DegenerateInput(f"grid orientation is ambiguous ({len(unique)} matches)")
    return matches[0]


def detect_board(image, board: CalibrationBoard, device: str, pose_index: int, detector=None) -> ViewObservation:
    """Circle centres of a rendered board, labelled by board point id."""
    from .markerpose import ClassicalCenterDetector
    # half the board's bright level: the surround may be dark as well
    detector = detector or ClassicalCenterDetector(area_range=(8, 20000),
                                                   threshold=lambda im: 0.5 * np.percentile(im, 99))
    ellipses = detector(image)
    C = np.array([e.center for e in ellipses]).reshape(-1, 2)
    ids = order_grid(C, board)
    order = np.argsort(ids)
    return ViewObservation(C[order], device, pose_index, ids[order])


# -- persistence ---------------------------------------------------------------------

def result_to_kv(res: CalibrationResult) -> dict:
    from .io import camera_to_kv
    d = {"reference": res.reference}
    for n, cam in res.devices.items():
        extra = {"rms": res.rms.get(n, float("nan"))}
        d.update(camera_to_kv(n, cam, extra))
    d["views"] = sorted(res.view_poses)
    for (n, v), r in sorted(res.view_rms.items()):
        d[f"view_rms.{n}.{v}"] = r
    d["iterations"] = res.iterations
    for k, v in res.diagnostics.items():
        if isinstance(v, (int, float, str, bool)):
            d[f"diag.{k}"] = v
    return d
