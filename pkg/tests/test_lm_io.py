from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import random_rotation
from mmscan.errors import DegenerateInput, NonConvergence
from mmscan.geometry import CameraModel, RigidTransform
from mmscan.io import (camera_from_kv, camera_to_kv, read_kv, read_pgm, read_ply, read_poses, write_kv, write_pgm,
                       write_ply, write_poses)
from mmscan.lm import levenberg_marquardt, numeric_jacobian


def rosenbrock(x):
    return np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])


def rosenbrock_jac(x):
    return np.array([[-20 * x[0], 10.0], [-1.0, 0.0]])


def test_lm_solves_rosenbrock():
    res = levenberg_marquardt(rosenbrock, rosenbrock_jac, [-1.2, 1.0], max_iter=500)
    assert res.converged
    assert np.allclose(res.x, [1, 1], atol=1e-8)


@given(st.integers(0, 2**32 - 1))
def test_lm_cost_history_is_monotone(seed):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 4, 40)
    y = 2.5 * np.exp(-1.3 * t) + 0.4 + rng.normal(0, 0.02, t.size)

    def res(p):
        return p[0] * np.exp(-p[1] * t) + p[2] - y

    def jac(p):
        e = np.exp(-p[1] * t)
        return np.column_stack([e, -p[0] * t * e, np.ones_like(t)])

    out = levenberg_marquardt(res, jac, rng.uniform([0.5, 0.2, -1], [5, 3, 1]), max_iter=300)
    h = np.array(out.cost_history)
    assert np.all(np.diff(h) <= 0)
    assert out.cost == h[-1]


def test_numeric_jacobian_matches_analytic():
    x = np.array([0.3, -0.7])
    assert np.allclose(numeric_jacobian(rosenbrock, x), rosenbrock_jac(x), atol=1e-6)


def test_lm_reports_failure():
    res = levenberg_marquardt(rosenbrock, rosenbrock_jac, [-1.2, 1.0], max_iter=2)
    assert not res.converged and res.reason == "max_iter"
    with pytest.raises(NonConvergence):
        levenberg_marquardt(rosenbrock, rosenbrock_jac, [-1.2, 1.0], max_iter=2, raise_on_failure=True)


# -- file formats --------------------------------------------------------------------

def test_pgm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (17, 23)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_rejects_non_binary(tmp_path):
    (tmp_path / "b.pgm").write_text("P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(DegenerateInput):
        read_pgm(tmp_path / "b.pgm")


def test_ply_roundtrip_with_sources(tmp_path, rng):
    P = rng.normal(size=(30, 3)) * 100
    s = rng.integers(0, 2, 30)
    write_ply(tmp_path / "c.ply", P, s, ["frame W"])
    Q, t, comments = read_ply(tmp_path / "c.ply")
    assert np.allclose(P, Q, atol=1e-6) and np.array_equal(s, t) and comments == ["frame W"]
    write_ply(tmp_path / "e.ply", np.zeros((0, 3)))
    Q, t, _ = read_ply(tmp_path / "e.ply")
    assert Q.shape == (0, 3) and t is None


def test_kv_roundtrip(tmp_path):
    d = {"a": 1, "b": 2.5, "c": "text", "d": True, "e": np.array([1.5, -2.0, 3.25])}
    write_kv(tmp_path / "k.txt", d, ["header"])
    e = read_kv(tmp_path / "k.txt")
    assert e["a"] == 1 and e["b"] == 2.5 and e["c"] == "text" and e["d"] is True
    assert np.array_equal(e["e"], d["e"])


def test_camera_and_pose_roundtrip(tmp_path, rng):
    cam = CameraModel(2400.5, 2399.25, 640.1, 511.9, (1280, 1024), RigidTransform(random_rotation(rng), [150, 1, 2]))
    write_kv(tmp_path / "cal.txt", camera_to_kv("cam2", cam))
    back = camera_from_kv(read_kv(tmp_path / "cal.txt"), "cam2")
    assert np.array_equal(back.K, cam.K)
    assert np.array_equal(back.pose.as_row(), cam.pose.as_row())
    poses = {3: cam.pose, 7: RigidTransform()}
    write_poses(tmp_path / "poses.txt", poses)
    got = read_poses(tmp_path / "poses.txt")
    assert sorted(got) == [3, 7] and np.array_equal(got[3].as_row(), cam.pose.as_row())


def test_missing_files_are_input_errors(tmp_path):
    with pytest.raises(DegenerateInput):
        read_poses(tmp_path / "nope.txt")
    with pytest.raises(DegenerateInput):
        camera_from_kv({}, "cam1")
