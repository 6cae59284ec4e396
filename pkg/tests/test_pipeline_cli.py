from __future__ import annotations

import hashlib
import shutil
import subprocess
import sys

import numpy as np
import pytest

from mmscan.cli import main
from mmscan.io import read_kv, read_ply, write_pgm, write_ply
from mmscan.simulator.protocols import INNER_RADIUS, OUTER_RADIUS, truth_probe_calibration


def run_cli(*args):
    return main([str(a) for a in args])


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text("scale = 0.25\nframes = 12\ncalibrations = 3\n")
    (root / "clean.cfg").write_text("scale = 0.25\nframes = 12\ncalibrations = 3\nnoise = none\n")
    return root


@pytest.fixture(scope="module")
def cylinders(work):
    d = work / "cyl"
    assert run_cli("simulate", "concentric-cylinders", "--config", work / "small.cfg", "--out", d,
                   "--deterministic") == 0
    return d


# -- simulate ------------------------------------------------------------------------

def test_simulate_is_reproducible(work, monkeypatch):
    for tag in ("a", "b"):
        (work / tag).mkdir()
        monkeypatch.chdir(work / tag)
        assert run_cli("simulate", "probe-calib-5x30", "--config", work / "small.cfg", "--seed", 4,
                       "--out", "sim", "--deterministic") == 0
    assert digest(work / "a" / "sim") == digest(work / "b" / "sim")
    assert read_kv(work / "a" / "sim" / "simulate_report.txt")["cal_0.frames"] == 12


def test_unknown_protocol_is_rejected(work):
    with pytest.raises(SystemExit):
        run_cli("simulate", "teapot", "--out", work / "x")


def test_bad_config_value_exits_2(work, capsys):
    (work / "bad.cfg").write_text("noise = loud\n")
    assert run_cli("simulate", "plane-5poses", "--config", work / "bad.cfg", "--out", work / "bad") == 2
    assert "error:" in capsys.readouterr().err


# -- calibrate -----------------------------------------------------------------------

def test_calibrate_probe(work):
    data = work / "probe"
    run_cli("simulate", "probe-calib-5x30", "--config", work / "small.cfg", "--out", data, "--deterministic")
    out = work / "probe_out"
    assert run_cli("calibrate", data, "--mode", "probe", "--out", out, "--deterministic") == 0
    rep = read_kv(out / "calib_probe_report.txt")
    truth = truth_probe_calibration()
    for k in range(3):
        assert 0.05 < rep[f"cal_{k}.rms_mm"] < 1.0
        assert np.linalg.norm(np.asarray(rep[f"cal_{k}.translation"]) - truth.t_T_I.translation) < 2.0
        assert len(rep[f"cal_{k}.rotvec"]) + len(rep[f"cal_{k}.translation"]) + 2 + 3 == 11
    assert len(list(out.glob("probe_cal_*.txt"))) == 3
    assert (out / "probe_residuals.png").stat().st_size > 0


def test_calibrate_without_poses_exits_2(work):
    data = work / "probe_broken"
    run_cli("simulate", "probe-calib-5x30", "--config", work / "small.cfg", "--out", data, "--deterministic")
    (data / "cal_0" / "poses.txt").unlink()
    assert run_cli("calibrate", data / "cal_0", "--mode", "probe", "--out", work / "broken_out") == 2


def test_calibrate_stereo_noiseless(work):
    data = work / "board"
    assert run_cli("simulate", "calib-board", "--config", work / "clean.cfg", "--out", data, "--deterministic") == 0
    out = work / "board_out"
    assert run_cli("calibrate", data, "--mode", "stereo", "--out", out, "--deterministic") == 0
    rep = read_kv(out / "calib_stereo_report.txt")
    assert rep["cam1.rms_px"] < 1e-6 and rep["cam2.rms_px"] < 1e-6
    assert run_cli("calibrate", data, "--mode", "projector", "--out", out, "--deterministic") == 0
    assert read_kv(out / "calib_projector_report.txt")["projector.rms_px"] < 1e-6


def test_evaluate_probe_cr(work):
    out = work / "probe_out"
    if not out.exists():
        pytest.skip("depends on test_calibrate_probe")
    assert run_cli("evaluate", out, "--truth", work / "probe" / "cal_0" / "truth" / "truth.txt",
                   "--out", work / "probe_eval", "--deterministic") == 0
    rep = read_kv(work / "probe_eval" / "report.txt")
    assert rep["kind"] == "probe" and rep["calibrations"] == 3
    assert 0 < rep["cr2.center"] <= rep["cr1.center"]
    assert (work / "probe_eval" / "cr.png").exists()


def test_noiseless_probe_metrics_vanish(work):
    data = work / "probe_clean"
    run_cli("simulate", "probe-calib-5x30", "--config", work / "clean.cfg", "--out", data, "--deterministic")
    out = work / "probe_clean_out"
    assert run_cli("calibrate", data, "--mode", "probe", "--out", out, "--deterministic") == 0
    assert run_cli("evaluate", out, "--truth", data / "cal_0" / "truth" / "truth.txt", "--out", out / "eval",
                   "--deterministic") == 0
    rep = read_kv(out / "eval" / "report.txt")
    assert rep["cr1.center"] < 0.05 and rep["cal0.rotation_error_deg"] < 0.05
    assert abs(rep["cal0.sx_rel_error"]) < 1e-3


# -- reconstruct ---------------------------------------------------------------------

def test_reconstruct_plane_echoes_fit(work, capsys):
    data = work / "plane"
    run_cli("simulate", "plane-5poses", "--config", work / "small.cfg", "--out", data, "--deterministic")
    before = digest(data / "pose_0")
    assert run_cli("reconstruct", data / "pose_0", "--out", work / "plane0.ply", "--deterministic") == 0
    assert "warning: no --calib given" in capsys.readouterr().err
    assert digest(data / "pose_0") == before
    rep = read_kv(work / "plane0.txt")
    assert rep["points"] > 1000 and rep["plane.rms"] < 0.3
    pts, _, comments = read_ply(work / "plane0.ply")
    assert len(pts) == rep["points"] and "frame W" in comments


def test_reconstruct_empty_mask_gives_empty_cloud(work, capsys):
    src = work / "plane" / "pose_1"
    if not src.exists():
        run_cli("simulate", "plane-5poses", "--config", work / "small.cfg", "--out", work / "plane")
    data = work / "dark_plane"
    shutil.copytree(src, data)
    for p in (data / "cam1").glob("*.pgm"):
        write_pgm(p, np.zeros((256, 320), np.uint8))
    assert run_cli("reconstruct", data, "--out", work / "dark.ply") == 0
    assert "empty point cloud" in capsys.readouterr().err
    assert len(read_ply(work / "dark.ply")[0]) == 0


def test_reconstruct_without_calibration_exits_2(work, tmp_path):
    (tmp_path / "meta.txt").write_text("steps = 8\n")
    assert run_cli("reconstruct", tmp_path, "--out", tmp_path / "x.ply") == 2


# -- fuse / evaluate -----------------------------------------------------------------

def test_cylinders_end_to_end(work, cylinders):
    d = cylinders
    assert run_cli("reconstruct", d / "sl", "--out", d / "sl.ply", "--deterministic") == 0
    assert run_cli("fuse", "--sl", d / "sl.ply", "--us", d / "us", "--probe", d / "us" / "truth" / "probe.txt",
                   "--out", d / "fused.ply", "--deterministic") == 0
    pts, src, comments = read_ply(d / "fused.ply")
    assert set(np.unique(src)) == {0, 1}
    # one shared frame and nothing that looks like a registration
    assert not any("transform" in c or "registration" in c for c in comments)
    assert not any("transform" in k for k in read_kv(d / "fused.txt"))
    assert run_cli("evaluate", d / "fused.ply", "--truth", d / "truth.txt", "--out", d / "eval",
                   "--deterministic") == 0
    rep = read_kv(d / "eval" / "report.txt")
    assert abs(rep["gap_error"]) < 0.3
    assert rep["gap"] == pytest.approx(OUTER_RADIUS - INNER_RADIUS, abs=0.3)


def test_fuse_without_ultrasound_warns(work, cylinders, capsys):
    d = cylinders
    if not (d / "sl.ply").exists():
        write_ply(d / "sl.ply", np.random.default_rng(0).normal(size=(20, 3)), comments=["frame W"])
    assert run_cli("fuse", "--sl", d / "sl.ply", "--out", work / "sl_only.ply") == 0
    assert "structured-light only" in capsys.readouterr().err
    assert read_kv(work / "sl_only.txt")["us.count"] == 0


def test_fuse_rejects_foreign_frame(work):
    write_ply(work / "cam2.ply", np.zeros((3, 3)), comments=["frame cam2"])
    assert run_cli("fuse", "--sl", work / "cam2.ply", "--out", work / "f.ply") == 2
    assert run_cli("fuse", "--sl", work / "cam2.ply", "--us", work, "--out", work / "f.ply") == 2


def test_breast_analog_tumours_inside_surface(work):
    d = work / "breast"
    assert run_cli("simulate", "breast-analog", "--config", work / "small.cfg", "--out", d, "--deterministic") == 0
    run_cli("reconstruct", d / "sl", "--out", d / "sl.ply", "--deterministic")
    run_cli("fuse", "--sl", d / "sl.ply", "--us", d / "us", "--probe", d / "us" / "truth" / "probe.txt",
            "--out", d / "fused.ply", "--deterministic")
    assert run_cli("evaluate", d / "fused.ply", "--truth", d / "truth.txt", "--out", d / "eval") == 0
    rep = read_kv(d / "eval" / "report.txt")
    assert rep["all_inside"] is True or rep["all_inside"] == "true"
    assert rep["us.clusters"] == 3


def test_evaluate_missing_truth_exits_2(work):
    write_ply(work / "any.ply", np.zeros((4, 3)))
    assert run_cli("evaluate", work / "any.ply", "--truth", work / "nope.txt", "--out", work / "e") == 2


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "mmscan.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("simulate", "calibrate", "reconstruct", "track", "fuse", "evaluate"):
        assert cmd in r.stdout


def test_track_rendered_marker_frames(work):
    (work / "markers.cfg").write_text("frames = 3\ncalibrations = 1\nrender_markers = true\nnoise = none\n")
    data = work / "markers"
    assert run_cli("simulate", "probe-calib-5x30", "--config", work / "markers.cfg", "--out", data,
                   "--deterministic") == 0
    d = data / "cal_0"
    assert run_cli("track", d, "--calib", d / "truth" / "rig.txt", "--out", d / "tracked.txt", "--deterministic") == 0
    rep = read_kv(d / "tracked_report.txt")
    assert rep["tracked"] == 3 and rep["failed"] == 0
    assert rep["rotation_error_deg.max"] < 0.3 and rep["translation_error_mm.max"] < 0.1
