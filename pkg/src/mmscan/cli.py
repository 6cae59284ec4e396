"""``mmscan`` command line: simulate, calibrate, reconstruct, track, fuse, evaluate.

Every command prints a ``key = value`` report and writes it next to its
outputs. Exit codes: 0 success, 2 degenerate input, 3 non-convergence,
1 other failures (for example an unwritable output path).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import sys
import warnings
from pathlib import Path

import numpy as np

from . import pipeline, plotting
from .errors import DegenerateInput, FrameMismatch, MMScanError
from .io import (SOURCE_TAGS, format_value, read_kv, read_pgm, read_ply, read_poses, read_table, write_kv, write_ply,
                 write_poses)


def _header(cmd: str, deterministic: bool) -> list[str]:
    h = [f"mmscan {cmd}"]
    if not deterministic:
        h.append("generated " + _dt.datetime.now().isoformat(timespec="seconds"))
    return h


def _emit(report: dict, path: Path | None, cmd: str, deterministic: bool) -> None:
    for k, v in report.items():
        print(f"{k} = {format_value(v)}")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_kv(path, report, _header(cmd, deterministic))


def _config(args) -> dict:
    return read_kv(args.config) if args.config else {}


# -- commands -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .simulator import ProtocolConfig, run_protocol
    cfg = ProtocolConfig.from_kv(_config(args))
    out = Path(args.out or args.protocol)
    run = run_protocol(args.protocol, out, seed=args.seed, config=cfg)
    report = {"protocol": run.name, "seed": args.seed, "out": str(out), "recordings": len(run.recordings),
              "captures": len(run.captures)}
    for rec in run.recordings:
        report[f"{rec.name}.frames"] = len(rec.frames)
    _emit(report, out / "simulate_report.txt", "simulate", args.deterministic)
    return 0


def load_board_dataset(directory: Path):
    from .calib import CalibrationBoard, ViewObservation
    meta_path = directory / "meta.txt"
    if not meta_path.exists():
        raise DegenerateInput(f"{directory} has no meta.txt")
    meta = read_kv(meta_path)
    board = CalibrationBoard(int(meta["board.rows"]), int(meta["board.cols"]), float(meta["board.spacing"]),
                             float(meta.get("board.radius", 6.0)))
    obs, sizes = [], {}
    for name in ("cam1", "cam2", "projector"):
        path = directory / "observations" / f"{name}.txt"
        if not path.exists():
            continue
        sizes[name] = (int(meta[f"{name}.width"]), int(meta[f"{name}.height"]))
        t = read_table(path)
        for pose in np.unique(t[:, 0]).astype(int):
            rows = t[t[:, 0] == pose]
            obs.append(ViewObservation(rows[:, 2:4], name, int(pose), rows[:, 1].astype(int)))
    return board, obs, sizes


def _probe_dirs(directory: Path) -> list[Path]:
    if (directory / "bscans").is_dir():
        return [directory]
    subs = sorted(p for p in directory.iterdir() if p.is_dir() and (p / "bscans").is_dir())
    if not subs:
        raise DegenerateInput(f"{directory}: no B-scan dataset found")
    return subs


def cmd_calibrate(args) -> int:
    from .calib import calibrate_pair, result_to_kv
    from .usfreehand import CalibrationDataset, calibration_to_kv, load_scans, pooled_rms, solve_calibration
    data = Path(args.dataset)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    cfg = _config(args)
    if args.mode in ("stereo", "projector"):
        board, obs, sizes = load_board_dataset(data)
        other = "cam2" if args.mode == "stereo" else "projector"
        if other not in sizes or "cam1" not in sizes:
            raise DegenerateInput(f"dataset lacks observations for cam1 and {other}")
        res = calibrate_pair(board, obs, sizes, "cam1", other, max_iter=int(cfg.get("max_iter", 200)))
        kv = result_to_kv(res)
        write_kv(out / f"calib_{args.mode}.txt", kv, _header("calibrate", args.deterministic))
        report = {"mode": args.mode, "views": len(res.view_poses)}
        for n, r in res.rms.items():
            report[f"{n}.rms_px"] = r
            cam = res.devices[n]
            report[f"{n}.intrinsics"] = [cam.fu, cam.fv, cam.cu, cam.cv]
        report["baseline_mm"] = float(np.linalg.norm(res.devices[other].pose.translation))
        report["iterations"] = res.iterations
        report["rotation_spread_deg"] = res.diagnostics["rotation_spread_deg"]
        report["translation_spread_mm"] = res.diagnostics["translation_spread"]
        _emit(report, out / f"calib_{args.mode}_report.txt", "calibrate", args.deterministic)
        return 0
    reports = []
    report = {"mode": "probe"}
    for d in _probe_dirs(data):
        meta = read_kv(d / "meta.txt") if (d / "meta.txt").exists() else {}
        scans = load_scans(d)
        ds = CalibrationDataset.from_scans(scans, float(meta.get("depth_mm", 50.0)))
        rep = solve_calibration(ds, max_iter=int(cfg.get("max_iter", 500)))
        reports.append(rep)
        write_kv(out / f"probe_{d.name}.txt", calibration_to_kv(rep), _header("calibrate", args.deterministic))
        c = rep.calibration
        report[f"{d.name}.frames"] = len(ds)
        report[f"{d.name}.skipped"] = len(scans) - len(ds)
        report[f"{d.name}.rms_mm"] = rep.rms
        report[f"{d.name}.rotvec"] = c.t_T_I.rotvec
        report[f"{d.name}.translation"] = c.t_T_I.translation
        report[f"{d.name}.scales"] = [c.sx, c.sy]
        report[f"{d.name}.cross_point"] = rep.phantom.cross_point_world
    report["pooled_rms_mm"] = pooled_rms(reports)
    report["mean_rms_mm"] = float(np.mean([r.rms for r in reports]))
    plotting.probe_residuals([np.linalg.norm(r.residuals, axis=1) for r in reports], out / "probe_residuals.png")
    _emit(report, out / "calib_probe_report.txt", "calibrate", args.deterministic)
    return 0


def _calib_paths(args, dataset: Path) -> list[Path]:
    if args.calib:
        return [Path(p) for p in args.calib]
    fallback = dataset / "truth" / "rig.txt"
    if not fallback.exists():
        raise DegenerateInput("no --calib given and no simulator device file in the dataset")
    warnings.warn(f"no --calib given; using simulator device models {fallback}")
    return [fallback]


def cmd_reconstruct(args) -> int:
    data = Path(args.dataset)
    cfg = _config(args)
    method = args.method or cfg.get("method", "gray")
    devices = pipeline.load_devices(_calib_paths(args, data))
    cloud = pipeline.reconstruct_dataset(data, devices, method)
    out = Path(args.out or "cloud.ply")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(out, cloud.points, comments=["frame W", "source SL"])
    report = {"points": len(cloud), "method": method, "out": str(out)}
    fit = args.fit
    if fit == "auto":
        truth = data / "truth" / "truth.txt"
        fit = read_kv(truth).get("surface", "none") if truth.exists() else "none"
    if len(cloud) >= 10:
        if fit == "plane":
            report.update(pipeline.evaluate_plane(cloud))
        elif fit == "sphere":
            report.update(pipeline.evaluate_sphere(cloud))
    _emit(report, out.with_suffix(".txt"), "reconstruct", args.deterministic)
    return 0


def cmd_track(args) -> int:
    from .geometry import rotation_angle_deg
    from .markerpose import MarkerGeometry, track_frame
    data = Path(args.dataset)
    cfg = _config(args)
    devices = pipeline.load_devices(_calib_paths(args, data))
    cams = (devices["cam1"], devices["cam2"])
    geom = MarkerGeometry(float(cfg.get("d01", 40.0)), float(cfg.get("d02", 40.0)), float(cfg.get("radius", 7.5)))
    frames = sorted((data / "cam1").glob("frame_*.pgm"))
    if not frames:
        raise DegenerateInput(f"{data}/cam1 holds no marker frames")
    poses, failed = {}, []
    for f in frames:
        fid = int(f.stem.split("_")[1])
        try:
            tp = track_frame(read_pgm(f), read_pgm(data / "cam2" / f.name), cams, geom)
            poses[fid] = tp.pose
        except DegenerateInput:
            failed.append(fid)
    out = Path(args.out or data / "poses_tracked.txt")
    write_poses(out, poses)
    report = {"frames": len(frames), "tracked": len(poses), "failed": len(failed), "out": str(out)}
    truth_path = data / "truth" / "poses_true.txt"
    if truth_path.exists() and poses:
        truth = read_poses(truth_path)
        rot = [rotation_angle_deg(p.rotation, truth[i].rotation) for i, p in poses.items() if i in truth]
        tra = [float(np.linalg.norm(p.translation - truth[i].translation)) for i, p in poses.items() if i in truth]
        report.update({"rotation_error_deg.median": float(np.median(rot)), "rotation_error_deg.max": float(np.max(rot)),
                       "translation_error_mm.median": float(np.median(tra)),
                       "translation_error_mm.max": float(np.max(tra))})
    _emit(report, out.with_name(out.stem + "_report.txt"), "track", args.deterministic)
    return 0


def _ply_frame(comments) -> str:
    for c in comments:
        if c.startswith("frame "):
            return c.split()[1]
    return "W"


def cmd_fuse(args) -> int:
    from .slcodec import PointCloud
    from .usfreehand import calibration_from_kv, load_scans
    pts, _, comments = read_ply(args.sl)
    sl = PointCloud(pts, np.full(len(pts), SOURCE_TAGS["SL"]), _ply_frame(comments))
    us = None
    if args.us:
        if not args.probe:
            raise DegenerateInput("--us needs --probe")
        cal = calibration_from_kv(read_kv(args.probe))
        us = pipeline.map_sweep(load_scans(args.us), cal)
    if sl.frame != "W":
        raise FrameMismatch(f"structured-light cloud is in frame {sl.frame!r}, expected 'W'")
    result = pipeline.fuse(sl, us)
    merged = result.merged()
    out = Path(args.out or "fused.ply")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(out, merged.points, merged.sources, comments=["frame W", "source 0=SL 1=US"])
    plotting.fused_views(result.sl_cloud.points, result.us_cloud.points, out.with_suffix(".png"))
    report = result.summary()
    report["out"] = str(out)
    _emit(report, out.with_suffix(".txt"), "fuse", args.deterministic)
    return 0


def _load_probe_results(paths) -> tuple[list, list]:
    from .usfreehand import calibration_from_kv
    files = []
    for p in map(Path, paths):
        files += sorted(p.glob("probe_*.txt")) if p.is_dir() else [p]
    if not files:
        raise DegenerateInput("no probe calibration files found")
    cals, residuals = [], []
    for f in files:
        d = read_kv(f)
        cals.append(calibration_from_kv(d))
        if "probe.frame_residuals" in d:
            residuals.append(np.atleast_1d(d["probe.frame_residuals"]))
    return cals, residuals


def cmd_evaluate(args) -> int:
    from .slcodec import PointCloud
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    truths = [pipeline.load_truth(t) for t in args.truth]
    if len(truths) not in (1, len(args.results)):
        raise DegenerateInput("give one truth file, or one per result")
    truths = truths * len(args.results) if len(truths) == 1 else truths
    report = {}
    kind = truths[0].get("surface", "probe" if "probe.sx" in truths[0] else None)
    if kind is None:
        raise DegenerateInput("truth file names no surface and no probe calibration")
    report["kind"] = kind
    if kind == "probe":
        from .usfreehand import DEFAULT_IMAGE_SIZE, cr_table
        cals, residuals = _load_probe_results(args.results)
        size = (int(truths[0].get("image.width", DEFAULT_IMAGE_SIZE[0])),
                int(truths[0].get("image.height", DEFAULT_IMAGE_SIZE[1])))
        report.update(pipeline.evaluate_probe(cals, truths[0], size))
        if residuals:
            per = [float(np.sqrt(np.mean(r ** 2))) for r in residuals]
            report["rms.per_calibration"] = per
            report["rms.mean"] = float(np.mean(per))
            report["rms.pooled"] = float(np.sqrt(np.mean(np.concatenate(residuals) ** 2)))
        if len(cals) >= 2:
            plotting.cr_bars(cr_table(cals, size), out / "cr.png")
    else:
        all_pts = []
        for i, (res, truth) in enumerate(zip(args.results, truths)):
            pts, src, _ = read_ply(res)
            cloud = PointCloud(pts, src)
            tag = f"result{i}." if len(args.results) > 1 else ""
            if kind == "plane":
                r = pipeline.evaluate_plane(cloud)
                n_true = np.asarray(truth["plane.normal"])
                r["plane.normal_error_deg"] = float(np.degrees(np.arccos(min(abs(r["plane.normal"] @ n_true), 1.0))))
                all_pts.append(pts)
                from .geomfit import fit_plane
                m = fit_plane(cloud)
                plotting.plane_residual_map(pts, m.distances(pts), out / f"plane_{i}.png")
            elif kind == "sphere":
                r = pipeline.evaluate_sphere(cloud, float(truth["sphere.radius"]))
                from .geomfit import fit_sphere
                plotting.residual_histogram(fit_sphere(cloud).distances(pts), out / f"sphere_{i}.png")
            elif kind == "concentric-cylinders":
                r = pipeline.evaluate_cylinders(cloud, float(truth["cylinder.gap"]))
                plotting.fused_views(pts[src == 0], pts[src == 1], out / f"cylinders_{i}.png")
            elif kind == "breast-analog":
                r = pipeline.evaluate_containment(cloud, sum(1 for k in truth if k.endswith(".radius")))
                plotting.fused_views(pts[src == 0], pts[src == 1], out / f"breast_{i}.png")
            else:
                raise DegenerateInput(f"unknown surface kind {kind!r}")
            report.update({tag + k: v for k, v in r.items()})
        if kind == "plane" and all_pts:
            P = np.concatenate(all_pts)
            report["volume_mm"] = P.max(axis=0) - P.min(axis=0)
            rms = [report[f"result{i}.plane.rms" if len(args.results) > 1 else "plane.rms"]
                   for i in range(len(args.results))]
            report["plane.rms_mean"] = float(np.mean(rms))
    _emit(report, out / "report.txt", "evaluate", args.deterministic)
    return 0


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .simulator import PROTOCOLS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--deterministic", action="store_true", help="omit timestamps from report headers")
    p = argparse.ArgumentParser(prog="mmscan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    s.add_argument("protocol", choices=PROTOCOLS)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", parents=[common], help="calibrate a device pair or the probe")
    s.add_argument("dataset")
    s.add_argument("--mode", choices=("stereo", "projector", "probe"), required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("reconstruct", parents=[common], help="structured-light point cloud")
    s.add_argument("dataset")
    s.add_argument("--calib", nargs="+", help="calibration files providing cam1 and projector")
    s.add_argument("--method", choices=("gray", "centerline"))
    s.add_argument("--fit", choices=("auto", "plane", "sphere", "none"), default="auto")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("track", parents=[common], help="marker poses from stereo frames")
    s.add_argument("dataset")
    s.add_argument("--calib", nargs="+", help="calibration files providing cam1 and cam2")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("fuse", parents=[common], help="merge SL cloud and mapped B-scans")
    s.add_argument("--sl", required=True, help="structured-light PLY")
    s.add_argument("--us", help="tracked B-scan dataset directory")
    s.add_argument("--probe", help="probe calibration file")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("evaluate", parents=[common], help="metrics against ground truth")
    s.add_argument("results", nargs="+", help="PLY clouds, or probe calibration files/directories")
    s.add_argument("--truth", nargs="+", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
            return args.func(args)
    except MMScanError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
