from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import homogeneous, random_rotation
from mmscan.errors import DegenerateInput, UnderconstrainedMotion
from mmscan.geometry import RigidTransform, rotation_angle_deg
from mmscan.markerpose import MarkerGeometry
from mmscan.simulator import run_protocol
from mmscan.simulator.protocols import US_IMAGE_SIZE, pose_through, probe_sweep, truth_probe_calibration
from mmscan.simulator.render import CrossWire, synth_bscan
from mmscan.simulator.scene import NoiseModel, default_rig
from mmscan.usfreehand import (CalibrationDataset, ProbeCalibration, calibration_from_kv, calibration_to_kv,
                               canonical_rotations, cr1, cr1_mean, cr2, cr_table, map_pixel_to_world, pooled_rms,
                               segment_cross_point, solve_calibration, trial_pixels)

TRUTH = truth_probe_calibration()
POINT = np.array([10.0, 5.0, 650.0])


def truth_dataset(n, rng):
    """Probe poses through the wire crossing, each with the exact pixel it lands on."""
    poses = probe_sweep(n, rng, TRUTH, POINT, default_rig(), MarkerGeometry())
    uv = []
    for T in poses:
        q = (T @ TRUTH.t_T_I).inverse().apply(POINT)
        uv.append([q[0] / TRUTH.sx, q[1] / TRUTH.sy])
    return CalibrationDataset(poses, np.array(uv), US_IMAGE_SIZE)


def shifted(cal, dx):
    return ProbeCalibration(RigidTransform(cal.t_T_I.rotation, cal.t_T_I.translation + dx), cal.sx, cal.sy)


# -- segmentation ----------------------------------------------------------------------

def spot_image(u, v, speckle=0.0, rng=None):
    h, w = 408, 321
    vv, uu = np.mgrid[0:h, 0:w]
    img = 12 + 220 * np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / 8.0)
    if speckle:
        img = img * np.exp(rng.normal(-0.5 * speckle ** 2, speckle, img.shape))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def test_spot_centroid():
    assert np.linalg.norm(segment_cross_point(spot_image(160.25, 204.5)) - [160.25, 204.5]) < 0.1


def test_black_image_has_no_spot():
    with pytest.raises(DegenerateInput):
        segment_cross_point(np.zeros((408, 321), np.uint8))


def test_spot_under_speckle():
    rng = np.random.default_rng(0)
    errs = [np.linalg.norm(segment_cross_point(spot_image(u, v, 0.2, rng)) - [u, v])
            for u, v in rng.uniform([20, 20], [300, 380], (300, 2))]
    assert max(errs) < 0.5


def test_rendered_bscan_spot_matches_truth():
    rng = np.random.default_rng(1)
    T = probe_sweep(1, rng, TRUTH, POINT, default_rig(), MarkerGeometry())[0]
    scan, uv = synth_bscan(CrossWire(POINT), T, TRUTH, US_IMAGE_SIZE, rng=rng)
    assert np.linalg.norm(segment_cross_point(scan.image) - uv) < 0.1


# -- pixel to world --------------------------------------------------------------------

def test_map_pixel_trivial_cases():
    unit = ProbeCalibration(RigidTransform(), 1.0, 1.0)
    assert np.allclose(map_pixel_to_world(unit, RigidTransform(), [0, 0]), 0)
    quarter = ProbeCalibration(RigidTransform(), 0.25, 0.25)
    assert np.allclose(map_pixel_to_world(quarter, RigidTransform(), [10, 20]), [2.5, 5.0, 0])


@given(st.integers(0, 2**32 - 1))
def test_map_pixel_matches_homogeneous_chain(seed):
    rng = np.random.default_rng(seed)
    R1, t1, R2, t2 = random_rotation(rng), rng.uniform(-500, 500, 3), random_rotation(rng), rng.uniform(-100, 100, 3)
    sx, sy = rng.uniform(0.01, 1.0, 2)
    uv = rng.uniform(0, 400, 2)
    cal = ProbeCalibration(RigidTransform(R2, t2), sx, sy)
    oracle = homogeneous(R1, t1) @ homogeneous(R2, t2) @ np.array([sx * uv[0], sy * uv[1], 0, 1])
    got = map_pixel_to_world(cal, RigidTransform(R1, t1), uv)
    assert np.allclose(got, oracle[:3], atol=1e-9)


def test_scales_must_be_positive():
    with pytest.raises(DegenerateInput):
        ProbeCalibration(RigidTransform(), 0.0, 0.1)


# -- calibration -----------------------------------------------------------------------

def test_canonical_rotations():
    Rs = canonical_rotations()
    assert len(Rs) == 24 and len({tuple(R.ravel()) for R in Rs}) == 24
    assert all(np.isclose(np.linalg.det(R), 1) for R in Rs)


def test_noiseless_recovery_is_exact():
    rep = solve_calibration(truth_dataset(30, np.random.default_rng(2)))
    cal = rep.calibration
    assert rotation_angle_deg(cal.t_T_I.rotation, TRUTH.t_T_I.rotation) < 1e-6
    assert np.linalg.norm(cal.t_T_I.translation - TRUTH.t_T_I.translation) < 1e-6
    assert abs(cal.sx / TRUTH.sx - 1) < 1e-6 and abs(cal.sy / TRUTH.sy - 1) < 1e-6
    assert np.linalg.norm(rep.phantom.cross_point_world - POINT) < 1e-6
    assert rep.rms < 1e-9
    assert np.all(np.diff(rep.cost_history) <= 0)


def test_identical_orientations_are_rejected():
    rng = np.random.default_rng(3)
    R = random_rotation(rng)
    poses = [pose_through(TRUTH, R, uv, POINT) for uv in rng.uniform([30, 40], [290, 360], (10, 2))]
    uv = np.array([(p @ TRUTH.t_T_I).inverse().apply(POINT)[:2] / [TRUTH.sx, TRUTH.sy] for p in poses])
    with pytest.raises(UnderconstrainedMotion):
        solve_calibration(CalibrationDataset(poses, uv))
    with pytest.raises(UnderconstrainedMotion):
        solve_calibration(CalibrationDataset(poses[:5], uv[:5]))


def test_solution_moves_with_the_phantom():
    """A rigid motion of the whole setup moves p_F with it and leaves the calibration alone."""
    rng = np.random.default_rng(4)
    data = truth_dataset(30, rng)
    data.points = data.points + rng.normal(0, 0.5, data.points.shape)
    M = RigidTransform(random_rotation(rng), rng.uniform(-100, 100, 3))
    a = solve_calibration(data)
    b = solve_calibration(CalibrationDataset([M @ p for p in data.poses], data.points, data.image_size))
    assert np.linalg.norm(b.phantom.cross_point_world - M.apply(a.phantom.cross_point_world)) < 1e-6
    assert np.allclose(b.calibration.t_T_I.matrix(), a.calibration.t_T_I.matrix(), atol=1e-6)
    assert abs(b.calibration.sx / a.calibration.sx - 1) < 1e-6


@pytest.fixture(scope="module")
def noisy_calibrations():
    """Five 30-frame calibrations at reference noise, segmented from rendered B-scans."""
    run = run_protocol("probe-calib-5x30", None, seed=0)
    t0 = time.perf_counter()
    reports = [solve_calibration(CalibrationDataset.from_scans(rec.scans)) for rec in run.recordings]
    return reports, (time.perf_counter() - t0) / len(reports)


def test_noisy_recovery(noisy_calibrations):
    reports, seconds = noisy_calibrations
    for rep in reports:
        cal = rep.calibration
        assert rotation_angle_deg(cal.t_T_I.rotation, TRUTH.t_T_I.rotation) < 1.0
        assert np.linalg.norm(cal.t_T_I.translation - TRUTH.t_T_I.translation) < 1.0
        assert abs(cal.sx / TRUTH.sx - 1) < 0.02 and abs(cal.sy / TRUTH.sy - 1) < 0.02
        assert 0.2 <= rep.rms <= 0.7
    assert 0.2 <= pooled_rms(reports) <= 0.7
    assert seconds < 10


def test_mapped_points_cluster_with_reported_rms(noisy_calibrations):
    reports, _ = noisy_calibrations
    run = run_protocol("probe-calib-5x30", None, seed=0)
    rep, rec = reports[0], run.recordings[0]
    data = CalibrationDataset.from_scans(rec.scans)
    X = np.array([map_pixel_to_world(rep.calibration, T, uv) for T, uv in zip(data.poses, data.points)])
    spread = np.sqrt(np.mean(np.sum((X - rep.phantom.cross_point_world) ** 2, axis=1)))
    assert np.isclose(spread, rep.rms, rtol=1e-9)


def test_calibration_kv_round_trip(noisy_calibrations):
    rep = noisy_calibrations[0][0]
    d = calibration_to_kv(rep)
    back = calibration_from_kv(d)
    assert np.allclose(back.t_T_I.matrix(), rep.calibration.t_T_I.matrix())
    assert d["probe.frames"] == len(rep.residuals)
    with pytest.raises(DegenerateInput):
        calibration_from_kv({"probe.sx": 0.1})


# -- reproducibility -------------------------------------------------------------------

def test_cr_identical_calibrations_are_zero():
    for px in trial_pixels().values():
        assert cr1(TRUTH, TRUTH, px) == 0.0
        assert cr2([TRUTH, TRUTH, TRUTH], px) == 0.0
    assert cr_table([TRUTH] * 5)["mean"] == (0.0, 0.0)


def test_cr_offsets():
    a, b = shifted(TRUTH, [1.0, 0, 0]), TRUTH
    assert np.isclose(cr1(a, b, [100, 100]), 1.0)
    plus, minus = shifted(TRUTH, [0, 0.3, 0]), shifted(TRUTH, [0, -0.3, 0])
    assert np.isclose(cr2([plus, minus], [50, 60]), 0.3)
    assert np.isclose(cr1_mean([plus, minus, TRUTH], [0, 0]), (0.6 + 0.3 + 0.3) / 3)
    with pytest.raises(DegenerateInput):
        cr2([TRUTH], [0, 0])


@given(st.integers(0, 2**32 - 1))
def test_cr_nonnegative(seed):
    rng = np.random.default_rng(seed)
    cals = [shifted(TRUTH, rng.normal(0, 0.5, 3)) for _ in range(rng.integers(2, 6))]
    for px in trial_pixels().values():
        assert cr1_mean(cals, px) >= 0 and cr2(cals, px) >= 0


def test_cr_from_noisy_calibrations(noisy_calibrations):
    reports, _ = noisy_calibrations
    table = cr_table([r.calibration for r in reports])
    c1, c2 = table["center"]
    assert 0.2 <= c1 <= 0.9
    assert 0.1 <= c2 <= 1.0
    assert c2 <= c1
    assert all(v[1] <= v[0] for v in table.values())
