"""File formats: binary PGM, ASCII PLY, key-value text and pose tables.

Key-value files are line oriented::

    # comment
    key = value

Values are numbers, whitespace-separated number lists, or bare strings. Keys
are dotted paths (``cam1.fu``). Order is preserved on write.
"""

from __future__ import annotations

import os
import re
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DegenerateInput
from .geometry import CameraModel, RigidTransform

SOURCE_TAGS = {"SL": 0, "US": 1}
SOURCE_NAMES = {v: k for k, v in SOURCE_TAGS.items()}


# -- PGM ---------------------------------------------------------------------

def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise DegenerateInput("PGM images must be 2-D")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval separated by whitespace/comments
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if m is None:
            raise DegenerateInput(f"{path}: malformed PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DegenerateInput(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DegenerateInput(f"{path}: 16-bit PGM not supported")
    pos += 1  # single whitespace after maxval
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return arr.reshape(h, w).copy()


# -- PLY ---------------------------------------------------------------------

def write_ply(path, points, sources=None, comments: Iterable[str] = ()) -> None:
    """ASCII PLY. ``sources`` is an optional per-point tag array (0=SL, 1=US)."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines += [f"element vertex {len(P)}", "property float64 x", "property float64 y", "property float64 z"]
    if sources is not None:
        lines.append("property uint8 source")
    lines.append("end_header")
    body = []
    if sources is None:
        body = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in P]
    else:
        s = np.asarray(sources, dtype=int)
        body = [f"{x:.6f} {y:.6f} {z:.6f} {int(t)}" for (x, y, z), t in zip(P, s)]
    Path(path).write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None, list[str]]:
    """Return ``(points, sources or None, comments)``."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise DegenerateInput(f"{path}: not a PLY file")
    n, props, comments, i = 0, [], [], 1
    while i < len(text):
        line = text[i].strip()
        i += 1
        if line.startswith("format") and "ascii" not in line:
            raise DegenerateInput(f"{path}: only ASCII PLY is supported")
        if line.startswith("comment"):
            comments.append(line[8:])
        elif line.startswith("element vertex"):
            n = int(line.split()[2])
        elif line.startswith("property"):
            props.append(line.split()[-1])
        elif line == "end_header":
            break
    rows = [r.split() for r in text[i:i + n] if r.strip()]
    data = np.array(rows, dtype=float).reshape(n, len(props)) if n else np.zeros((0, len(props)))
    idx = [props.index(k) for k in ("x", "y", "z")]
    sources = data[:, props.index("source")].astype(int) if "source" in props else None
    return data[:, idx], sources, comments


# -- key-value text ----------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return v
    arr = np.asarray(v, dtype=float).ravel()
    return " ".join(repr(float(x)) for x in arr)


def _parse_value(s: str):
    s = s.strip()
    if s in ("true", "false"):
        return s == "true"
    parts = s.split()
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        return s
    if len(nums) == 1:
        if re.fullmatch(r"[+-]?\d+", parts[0]):
            return int(parts[0])
        return nums[0]
    return np.array(nums)


def write_kv(path, data: Mapping[str, object], header: Iterable[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    lines += [f"{k} = {format_value(v)}" for k, v in data.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip() if not line.lstrip().startswith("#") else ""
        if not line:
            continue
        if "=" not in line:
            raise DegenerateInput(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def camera_to_kv(name: str, cam: CameraModel, extra: Mapping[str, object] | None = None) -> dict:
    d = {
        f"{name}.fu": cam.fu, f"{name}.fv": cam.fv,
        f"{name}.cu": cam.cu, f"{name}.cv": cam.cv,
        f"{name}.width": cam.width, f"{name}.height": cam.height,
        f"{name}.distortion": cam.distortion if cam.distortion is not None else "none",
        f"{name}.rotation": cam.pose.rotation, f"{name}.translation": cam.pose.translation,
    }
    for k, v in (extra or {}).items():
        d[f"{name}.{k}"] = v
    return d


def camera_from_kv(d: Mapping[str, object], name: str) -> CameraModel:
    try:
        dist = d[f"{name}.distortion"]
        pose = RigidTransform(np.asarray(d[f"{name}.rotation"]).reshape(3, 3), d[f"{name}.translation"])
        return CameraModel(float(d[f"{name}.fu"]), float(d[f"{name}.fv"]), float(d[f"{name}.cu"]),
                           float(d[f"{name}.cv"]), (int(d[f"{name}.width"]), int(d[f"{name}.height"])),
                           pose, None if isinstance(dist, str) else tuple(np.ravel(dist)))
    except KeyError as e:
        raise DegenerateInput(f"missing calibration key {e}") from None


def transform_to_kv(name: str, T: RigidTransform) -> dict:
    return {f"{name}.rotation": T.rotation, f"{name}.translation": T.translation}


def transform_from_kv(d: Mapping[str, object], name: str) -> RigidTransform:
    try:
        return RigidTransform(np.asarray(d[f"{name}.rotation"]).reshape(3, 3), d[f"{name}.translation"])
    except KeyError as e:
        raise DegenerateInput(f"missing key {e}") from None


# -- pose tables -------------------------------------------------------------

def write_poses(path, poses: Mapping[int, RigidTransform] | Iterable[RigidTransform]) -> None:
    """One row per frame: ``frame_id r11 r12 ... r33 tx ty tz``."""
    items = poses.items() if isinstance(poses, Mapping) else enumerate(poses)
    lines = ["# frame r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz"]
    for fid, T in items:
        lines.append(f"{fid} " + " ".join(repr(float(x)) for x in T.as_row()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> dict[int, RigidTransform]:
    if not os.path.exists(path):
        raise DegenerateInput(f"missing poses file: {path}")
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 13:
            raise DegenerateInput(f"{path}: pose rows need 13 fields, got {len(parts)}")
        out[int(parts[0])] = RigidTransform.from_row([float(p) for p in parts[1:]])
    return out


def write_table(path, header: str, rows) -> None:
    lines = [f"# {header}"] + [" ".join(format_value(x) if not isinstance(x, (int, np.integer)) else str(x)
                                        for x in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> np.ndarray:
    if not os.path.exists(path):
        raise DegenerateInput(f"missing file: {path}")
    rows = [l.split() for l in Path(path).read_text().splitlines() if l.strip() and not l.startswith("#")]
    return np.array(rows, dtype=float) if rows else np.zeros((0, 0))
