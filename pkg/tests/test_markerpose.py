from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import rot_z
from mmscan.errors import AmbiguousTarget, DegenerateInput, ScaleMismatch, TargetNotVisible
from mmscan.geometry import RigidTransform, matrix_to_rotvec, rotation_angle_deg, rotvec_to_matrix
from mmscan.markerpose import (ClassicalCenterDetector, MarkerDetection, MarkerGeometry, assign_ids, detect_blobs,
                               estimate_pose, fit_ellipse, label_view, projected_circle_center, track_frame)
from mmscan.simulator.render import render_marker_views
from mmscan.simulator.scene import Scene, default_rig, look_at

GEOM = MarkerGeometry()
RIG = default_rig()
CAMS = (RIG.cam1, RIG.cam2)
# target z axis towards the cameras, x to the right
FACING = np.diag([1.0, -1.0, -1.0])


def random_pose(rng, tilt_deg=30.0):
    R = rotvec_to_matrix(np.radians(rng.uniform(-tilt_deg, tilt_deg, 3))) @ FACING
    R = R @ rot_z(rng.uniform(0, 360))
    t = np.array([rng.uniform(-60, 60), rng.uniform(-50, 50), rng.uniform(600, 800)])
    return RigidTransform(R, t - R @ GEOM.centers().mean(axis=0))


def true_centers(pose):
    return [cam.project_points(pose.apply(GEOM.centers())) for cam in CAMS]


def ellipse_centers(pose):
    return [np.array([projected_circle_center(cam, pose, c, GEOM.radius) for c in GEOM.centers()]) for cam in CAMS]


def match(found, truth):
    """Distance from each true centre to the nearest found centre."""
    F = np.array([e.center for e in found])
    return np.array([np.min(np.linalg.norm(F - t, axis=1)) for t in truth])


@pytest.fixture(scope="module")
def rendered():
    pose = random_pose(np.random.default_rng(1))
    return pose, render_marker_views(Scene([], RIG), pose)


# -- detection -----------------------------------------------------------------------

def test_render_gives_three_candidates(rendered):
    _, views = rendered
    for img in views.images:
        assert len(detect_blobs(img)) == 3


def test_blank_image_has_no_candidates():
    assert detect_blobs(np.full((100, 120), 128, np.uint8)) == []
    assert ClassicalCenterDetector()(np.zeros((100, 120), np.uint8)) == []


def test_low_light_keeps_candidates(rendered):
    pose, views = rendered
    dark = render_marker_views(Scene([], RIG), pose, gain=0.3)
    for a, b in zip(views.images, dark.images):
        ca = sorted(tuple(np.round(x.centroid)) for x in detect_blobs(a))
        cb = sorted(tuple(np.round(x.centroid)) for x in detect_blobs(b))
        assert len(cb) == 3 and np.abs(np.array(ca) - np.array(cb)).max() <= 1


def test_detected_centres_match_projected_circles(rendered):
    pose, views = rendered
    for img, truth in zip(views.images, ellipse_centers(pose)):
        found = ClassicalCenterDetector()(img)
        assert len(found) == 3
        assert match(found, truth).max() < 0.05
        assert all(e.residual < 0.5 for e in found)


# -- ellipse fit ---------------------------------------------------------------------

def test_fit_circle_exact():
    t = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    e = fit_ellipse(np.column_stack([100 + 10 * np.cos(t), 200 + 10 * np.sin(t)]))
    assert np.allclose(e.center, [100, 200], atol=1e-9)
    assert np.allclose(e.axes, [10, 10], atol=1e-9)


def test_fit_rotated_ellipse_exact():
    t = np.linspace(0, 2 * np.pi, 50, endpoint=False)
    th = np.radians(30)
    x, y = 20 * np.cos(t), 10 * np.sin(t)
    P = np.column_stack([x * np.cos(th) - y * np.sin(th) + 50, x * np.sin(th) + y * np.cos(th) - 20])
    e = fit_ellipse(P)
    assert np.allclose(e.center, [50, -20], atol=1e-6)
    assert np.allclose(e.axes, [20, 10], atol=1e-6)
    assert np.isclose(np.mod(e.angle, np.pi), th, atol=1e-6)
    assert e.residual < 1e-6


def test_fit_rejects_underdetermined_and_lines():
    with pytest.raises(DegenerateInput):
        fit_ellipse(np.random.default_rng(0).normal(size=(4, 2)))
    with pytest.raises(DegenerateInput):
        fit_ellipse(np.column_stack([np.arange(10.0), 2 * np.arange(10.0)]))


# -- IDs ---------------------------------------------------------------------------

def test_equilateral_triangle_is_ambiguous():
    tri = np.array([[0, 0], [10, 0], [5, 5 * np.sqrt(3)]])
    with pytest.raises(AmbiguousTarget):
        label_view(tri)
    with pytest.raises(AmbiguousTarget):
        label_view(tri[:2])


def test_ids_follow_the_target_in_both_views():
    rng = np.random.default_rng(2)
    for _ in range(200):
        pose = random_pose(rng, tilt_deg=40)
        t1, t2 = true_centers(pose)
        p1, p2 = rng.permutation(3), rng.permutation(3)
        d1, d2 = assign_ids(t1[p1], t2[p2], CAMS)
        assert np.allclose(d1.centers, t1) and np.allclose(d2.centers, t2)


def test_ids_under_half_turn():
    pose = random_pose(np.random.default_rng(3), tilt_deg=10)
    flipped = RigidTransform(pose.rotation @ rot_z(180), pose.translation)
    for p in (pose, flipped):
        t1, t2 = true_centers(p)
        d1, d2 = assign_ids(t1[::-1], t2[[1, 2, 0]], CAMS)
        assert np.allclose(d1.centers, t1) and np.allclose(d2.centers, t2)


def test_ids_invariant_to_gain_and_offset(rendered):
    _, views = rendered
    base = [ClassicalCenterDetector()(im) for im in views.images]
    ref = assign_ids(*base, CAMS)
    for g, o in ((0.5, 20), (0.8, -10)):
        imgs = [np.clip(g * im.astype(float) + o, 0, 255) for im in views.images]
        got = assign_ids(*[ClassicalCenterDetector()(im) for im in imgs], CAMS)
        for a, b in zip(ref, got):
            assert np.abs(a.centers - b.centers).max() < 0.1


def test_ids_without_cameras_on_a_frontal_view():
    pose = RigidTransform(FACING, [0, 0, 700])
    t1, _ = true_centers(pose)
    d1, _ = assign_ids(t1[[2, 0, 1]], t1[[1, 2, 0]])
    assert np.allclose(d1.centers, t1)


def test_ids_inconsistent_across_views():
    pose = random_pose(np.random.default_rng(4))
    t1, t2 = true_centers(pose)
    with pytest.raises(AmbiguousTarget):
        assign_ids(t1, t2 + [0, 40], CAMS)


# -- pose ----------------------------------------------------------------------------

def test_pose_from_simulated_centres():
    rng = np.random.default_rng(8)
    for _ in range(20):
        pose = random_pose(rng)
        dets = tuple(MarkerDetection(c, n) for c, n in zip(true_centers(pose), ("cam1", "cam2")))
        est = estimate_pose(dets, CAMS, GEOM)
        assert rotation_angle_deg(est.pose.rotation, pose.rotation) < 0.05
        assert np.linalg.norm(est.pose.translation - pose.translation) < 0.02


def test_pose_from_rendered_views(rendered):
    """8-bit rendering leaves about 0.02 px of centre error, worth roughly 0.1 deg at this range."""
    pose, views = rendered
    est = track_frame(*views.images, CAMS, GEOM)
    assert rotation_angle_deg(est.pose.rotation, pose.rotation) < 0.15
    assert np.linalg.norm(est.pose.translation - pose.translation) < 0.02
    assert est.pose.is_valid(1e-12)


def test_axis_aligned_target_gives_identity():
    cams = (RIG.cam1.with_pose(RigidTransform([[1, 0, 0], [0, -1, 0], [0, 0, -1]], [0, 0, 700])),
            RIG.cam2.with_pose(RigidTransform(rotvec_to_matrix([0, np.radians(-12), 0]) @ FACING, [150, 0, 700])))
    pose = RigidTransform()
    dets = [MarkerDetection(cam.project_points(GEOM.centers()), name) for cam, name in zip(cams, ("cam1", "cam2"))]
    est = estimate_pose(tuple(dets), cams, GEOM)
    assert np.allclose(est.pose.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(est.pose.translation, 0, atol=1e-9)


def test_scale_mismatch():
    pose = random_pose(np.random.default_rng(5))
    dets = tuple(MarkerDetection(c, n) for c, n in zip(true_centers(pose), ("cam1", "cam2")))
    with pytest.raises(ScaleMismatch):
        estimate_pose(dets, CAMS, MarkerGeometry(d01=50.0))


def _orientation_errors(cams, geom, pose, sigma, rng, n=1000):
    clean = [c.project_points(pose.apply(geom.centers())) for c in cams]
    errs = []
    for _ in range(n):
        dets = tuple(MarkerDetection(c + rng.normal(0, sigma, c.shape), v) for c, v in zip(clean, ("cam1", "cam2")))
        errs.append(rotation_angle_deg(estimate_pose(dets, cams).pose.rotation, pose.rotation))
    return np.array(errs)


def _first_order_median(cams, geom, pose, sigma, rng):
    """Median orientation error predicted by linear propagation of pixel noise."""
    clean = np.concatenate([c.project_points(pose.apply(geom.centers())).ravel() for c in cams])

    def rotvec(x):
        dets = (MarkerDetection(x[:6].reshape(3, 2), "cam1"), MarkerDetection(x[6:].reshape(3, 2), "cam2"))
        return matrix_to_rotvec(estimate_pose(dets, cams).pose.rotation @ pose.rotation.T)

    h = 1e-4
    J = np.column_stack([(rotvec(clean + h * e) - rotvec(clean - h * e)) / (2 * h) for e in np.eye(12)])
    C = sigma ** 2 * J @ J.T
    return np.degrees(np.median(np.linalg.norm(rng.multivariate_normal(np.zeros(3), C, 50_000), axis=1)))


def test_orientation_noise_matches_first_order_prediction():
    rng = np.random.default_rng(6)
    pose = RigidTransform(rotvec_to_matrix(np.radians([10, -15, 5])) @ FACING, [-20, -20, 700])
    errs = _orientation_errors(CAMS, GEOM, pose, 0.1, rng)
    assert abs(np.median(errs) / _first_order_median(CAMS, GEOM, pose, 0.1, rng) - 1) < 0.15


def test_orientation_noise_sixty_mm_target():
    """0.1 px centre noise, 60 mm target at 700 mm, stereo pair with a 200 mm baseline."""
    rng = np.random.default_rng(6)
    cams = (RIG.cam1, RIG.cam2.with_pose(look_at([200.0, 0.0, 0.0], [0.0, 0.0, 700.0])))
    geom = MarkerGeometry(d01=60.0, d02=60.0)
    pose = RigidTransform(rotvec_to_matrix(np.radians([10, -15, 5])) @ FACING, [-20, -20, 700])
    assert np.median(_orientation_errors(cams, geom, pose, 0.1, rng)) < 0.3


@settings(max_examples=1000)
@given(st.integers(0, 2**32 - 1))
def test_pose_round_trip(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng, tilt_deg=40)
    t1, t2 = true_centers(pose)
    d1, d2 = assign_ids(t1[rng.permutation(3)], t2[rng.permutation(3)], CAMS)
    est = estimate_pose((d1, d2), CAMS, GEOM)
    # arccos resolves angles near zero only to about 1e-6 deg
    assert rotation_angle_deg(est.pose.rotation, pose.rotation) < 1e-5
    assert np.linalg.norm(est.pose.translation - pose.translation) < 1e-6


# -- degraded images -----------------------------------------------------------------

def test_low_light_and_motion_blur():
    pose = random_pose(np.random.default_rng(7))
    views = render_marker_views(Scene([], RIG), pose, gain=0.3, blur_length=9)
    for img, truth in zip(views.images, ellipse_centers(pose)):
        assert match(ClassicalCenterDetector()(img), truth).max() < 0.3
    est = track_frame(*views.images, CAMS, GEOM)
    assert rotation_angle_deg(est.pose.rotation, pose.rotation) < 0.5


def test_target_behind_camera():
    pose = RigidTransform(FACING, [0, 0, -300])
    with pytest.raises(TargetNotVisible):
        render_marker_views(Scene([], RIG), pose)
    with pytest.raises(TargetNotVisible):
        track_frame(np.full((64, 64), 200, np.uint8), np.full((64, 64), 200, np.uint8), CAMS)
