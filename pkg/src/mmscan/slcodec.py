"""Structured-light encoding and decoding.

Fringe convention: shift ``n`` of an ``N``-step set is
``127.5 + 127.5 * cos(2*pi*x/p - 2*pi*n/N)`` so the decoded phase at projector
coordinate ``x`` is ``2*pi*x/p`` (wrapped). Projector pixel centres sit at
integer coordinates.

Gray code: ``bits`` planes encode the period index ``floor(x/p)``. The optional
complementary plane is the next-finer Gray bit; with it the planes encode the
half-period index ``floor(2x/p)``, which lets :func:`unwrap_absolute` resolve
indices away from every code transition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateInput
from .geometry import CameraModel

MODULATION_MIN = 5.0
TWO_PI = 2.0 * np.pi


@dataclass
class PatternSet:
    """A stack of 8-bit projector images with the parameters that made them."""

    kind: str                     # phase_shift | gray_code | centerline | white | black
    images: list[np.ndarray]
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)


@dataclass
class PhaseMap:
    values: np.ndarray
    mask: np.ndarray
    kind: str = "wrapped"         # wrapped | absolute
    modulation: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PointCloud:
    points: np.ndarray
    sources: np.ndarray | None = None   # 0 = SL, 1 = US
    frame: str = "W"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise DegenerateInput("point cloud contains non-finite points")

    def __len__(self):
        return len(self.points)


def gray_encode(n):
    n = np.asarray(n, dtype=np.int64)
    return n ^ (n >> 1)


def gray_decode(g):
    """Gray to binary by prefix XOR over the bits."""
    b = np.asarray(g, dtype=np.int64).copy()
    shift = b >> 1
    while np.any(shift):
        b ^= shift
        shift >>= 1
    return b


def _axis_coords(size, axis):
    w, h = size
    if axis == "x":
        return np.broadcast_to(np.arange(w, dtype=float)[None, :], (h, w))
    if axis == "y":
        return np.broadcast_to(np.arange(h, dtype=float)[:, None], (h, w))
    raise DegenerateInput(f"axis must be 'x' or 'y', got {axis!r}")


def generate_patterns(kind: str, projector_size: tuple[int, int], *, steps: int = 8, pitch: float = 18,
                      bits: int = 7, axis: str = "x", complementary: bool = False,
                      center: float | None = None, line_width: int = 3) -> PatternSet:
    """Build a projector pattern stack.

    ``axis="x"`` gives vertical fringes (intensity varies along columns);
    ``axis="y"`` gives horizontal fringes.
    """
    w, h = projector_size
    size = w if axis == "x" else h
    if kind == "phase_shift":
        if steps < 3:
            raise DegenerateInput("phase shifting needs at least 3 steps")
        if pitch < 4:
            raise DegenerateInput("fringe pitch must be at least 4 px")
        # reduce modulo the pitch first so the quantized stack is exactly periodic
        x = np.mod(_axis_coords(projector_size, axis), pitch)
        imgs = [np.rint(127.5 + 127.5 * np.cos(TWO_PI * x / pitch - TWO_PI * n / steps)).astype(np.uint8)
                for n in range(steps)]
        return PatternSet(kind, imgs, dict(steps=steps, pitch=pitch, axis=axis))
    if kind == "gray_code":
        if bits < 1 or pitch < 4:
            raise DegenerateInput("gray code needs bits >= 1 and pitch >= 4")
        if (2 ** bits) * pitch < size:
            raise DegenerateInput(f"{bits} bits x pitch {pitch} cannot cover {size} px")
        x = _axis_coords(projector_size, axis)
        if complementary:
            code = gray_encode(np.floor(2 * x / pitch).astype(np.int64))
            nplanes = bits + 1
        else:
            code = gray_encode(np.floor(x / pitch).astype(np.int64))
            nplanes = bits
        imgs = [(((code >> (nplanes - 1 - b)) & 1) * 255).astype(np.uint8) for b in range(nplanes)]
        return PatternSet(kind, imgs, dict(bits=bits, pitch=pitch, axis=axis, complementary=complementary))
    if kind == "centerline":
        c = float(size // 2) if center is None else center
        x = _axis_coords(projector_size, axis)
        img = np.where(np.abs(x - c) <= (line_width - 1) / 2, 255, 0).astype(np.uint8)
        return PatternSet(kind, [img], dict(center=float(np.round(c)) if line_width % 2 else c, axis=axis))
    if kind == "white":
        return PatternSet(kind, [np.full((h, w), 255, np.uint8)])
    if kind == "black":
        return PatternSet(kind, [np.zeros((h, w), np.uint8)])
    raise DegenerateInput(f"unknown pattern kind {kind!r}")


def wrapped_phase(captured: Sequence[np.ndarray], modulation_min: float = MODULATION_MIN) -> PhaseMap:
    """N-step phase retrieval; low-modulation pixels are masked out."""
    n_steps = len(captured)
    if n_steps < 3:
        raise DegenerateInput("need at least 3 phase-shifted frames")
    delta = TWO_PI * np.arange(n_steps) / n_steps
    stack = np.asarray(captured, dtype=float)
    S = np.tensordot(np.sin(delta), stack, axes=1)
    C = np.tensordot(np.cos(delta), stack, axes=1)
    phi = np.arctan2(S, C)
    phi = np.where(phi <= -np.pi, np.pi, phi)
    B = 2.0 / n_steps * np.hypot(S, C)
    mask = B >= modulation_min
    return PhaseMap(np.where(mask, phi, 0.0), mask, "wrapped", B)


def decode_gray(planes: Sequence[np.ndarray], white: np.ndarray, black: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Threshold each plane at ``(white + black) / 2`` and Gray-decode.

    Returns ``(index, mask)``; the mask is false where ``white <= black``.
    """
    if len(planes) < 1:
        raise DegenerateInput("need at least one gray-code plane")
    white = np.asarray(white, dtype=float)
    black = np.asarray(black, dtype=float)
    thr = 0.5 * (white + black)
    code = np.zeros(white.shape, dtype=np.int64)
    for p in planes:
        code = (code << 1) | (np.asarray(p, dtype=float) > thr)
    mask = white > black
    return np.where(mask, gray_decode(code), 0), mask


def unwrap_absolute(wrapped: PhaseMap, index: np.ndarray, index_mask: np.ndarray | None = None,
                    complementary: bool = True) -> PhaseMap:
    """Absolute phase ``phi + 2*pi*k``.

    With ``complementary=True``, ``index`` is the half-period index
    ``floor(2x/p)`` decoded from bits+1 planes. Two candidate period indices
    follow from it: ``k1 = m >> 1`` changes where the wrapped phase crosses 0,
    ``k2 = (m + 1) >> 1`` changes where it wraps at +-pi. Each pixel takes the
    candidate whose transition is a quarter period away, so a code read one
    step off at a boundary does not move the result.

    With ``complementary=False``, ``index`` is ``floor(x/p)`` and the fringe
    order is ``k + (phi < 0)``, which is only safe away from code edges.
    """
    phi = wrapped.values
    m = np.asarray(index, dtype=np.int64)
    if m.shape != phi.shape:
        raise DegenerateInput(f"dimension mismatch: phase {phi.shape} vs index {m.shape}")
    mask = wrapped.mask.copy()
    if index_mask is not None:
        mask &= index_mask
    if complementary:
        k1 = m >> 1
        k2 = (m + 1) >> 1
        k = np.where(phi > np.pi / 2, k1, np.where(phi < -np.pi / 2, k1 + 1, k2))
    else:
        k = m + (phi < 0)
    Phi = np.where(mask, phi + TWO_PI * k, 0.0)
    return PhaseMap(Phi, mask, "absolute", wrapped.modulation)


def find_centerline(centerline: np.ndarray, reference: np.ndarray, mask: np.ndarray,
                    min_ratio: float = 0.6) -> np.ndarray:
    """Sub-pixel column of the bright stripe in each row (NaN where absent).

    ``reference`` is the fringe average intensity, so the stripe is detected
    relative to local albedo and shading.
    """
    c = np.asarray(centerline, dtype=float)
    ref = np.asarray(reference, dtype=float)
    ratio = np.where(mask & (ref > 0), c / np.maximum(2.0 * ref, 1e-9), 0.0)
    cols = np.full(c.shape[0], np.nan)
    w = c.shape[1]
    for row in range(c.shape[0]):
        r = ratio[row]
        j = int(np.argmax(r))
        if r[j] < min_ratio:
            continue
        lo, hi = max(j - 3, 0), min(j + 4, w)
        seg = np.clip(r[lo:hi] - 0.5 * r[j], 0.0, None)
        cols[row] = lo + np.sum(seg * np.arange(hi - lo)) / np.sum(seg)
    return cols


def unwrap_centerline(wrapped: PhaseMap, centerline: np.ndarray, pitch: float, line_center: float,
                      reference: np.ndarray | None = None) -> PhaseMap:
    """Spatial unwrapping seeded by a projected centre line.

    In each row the stripe pixel is assigned the absolute phase
    ``2*pi*line_center/pitch`` (rounded to the fringe order consistent with
    its wrapped phase); the phase is then propagated along contiguous valid
    pixels of the row, and finally down/up columns into pixels the row pass
    could not reach. Unreached pixels are masked.
    """
    phi = wrapped.values
    mask = wrapped.mask
    h, w = phi.shape
    ref = reference if reference is not None else np.where(mask, 127.5, 0.0)
    cols = find_centerline(centerline, ref, mask)
    if np.all(np.isnan(cols)):
        raise DegenerateInput("centre line not found in any row")
    seed_phase = TWO_PI * line_center / pitch
    k = np.zeros((h, w), dtype=np.int64)
    done = np.zeros((h, w), dtype=bool)
    for row in np.flatnonzero(~np.isnan(cols)):
        j0 = int(np.clip(np.rint(cols[row]), 0, w - 1))
        if not mask[row, j0]:
            continue
        k[row, j0] = np.rint((seed_phase - phi[row, j0]) / TWO_PI)
        done[row, j0] = True
        for step in (1, -1):
            j = j0 + step
            while 0 <= j < w and mask[row, j]:
                dk = np.rint((phi[row, j - step] - phi[row, j]) / TWO_PI)
                k[row, j] = k[row, j - step] + dk
                done[row, j] = True
                j += step
    # column pass fills valid pixels not connected to a seed along their row
    for _ in range(2):
        for direction in (1, -1):
            rows = range(1, h) if direction == 1 else range(h - 2, -1, -1)
            for row in rows:
                prev = row - direction
                todo = mask[row] & ~done[row] & done[prev]
                if not np.any(todo):
                    continue
                dk = np.rint((phi[prev, todo] - phi[row, todo]) / TWO_PI)
                k[row, todo] = k[prev, todo] + dk
                done[row, todo] = True
                # extend along the row from the newly filled pixels
                for j0 in np.flatnonzero(todo):
                    for step in (1, -1):
                        j = j0 + step
                        while 0 <= j < w and mask[row, j] and not done[row, j]:
                            k[row, j] = k[row, j - step] + np.rint((phi[row, j - step] - phi[row, j]) / TWO_PI)
                            done[row, j] = True
                            j += step
    out_mask = mask & done
    Phi = np.where(out_mask, phi + TWO_PI * k, 0.0)
    return PhaseMap(Phi, out_mask, "absolute", wrapped.modulation)


def reconstruct(absolute: PhaseMap, cam: CameraModel, proj: CameraModel, pitch: float) -> PointCloud:
    """Triangulate each valid camera pixel against its projector column.

    Projector column ``x_p = Phi * pitch / (2*pi)``. Per pixel the two camera
    projection equations and the projector column equation form a 3x3 linear
    system in the world point.
    """
    vs, us = np.nonzero(absolute.mask)
    if len(us) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros(0, dtype=int))
    xp = absolute.values[vs, us] * pitch / TWO_PI
    # distortion: solve in the undistorted camera plane, projector assumed distortion-free along rows
    xn = cam.normalized(np.column_stack([us, vs]).astype(float))
    Pc = cam.world_to_device.matrix()[:3]
    Pp = proj.projection_matrix()
    if proj.distortion is not None:
        raise DegenerateInput("projector distortion is not supported by column-plane triangulation")
    rows0 = xn[:, 0:1] * Pc[2] - Pc[0]
    rows1 = xn[:, 1:2] * Pc[2] - Pc[1]
    rows2 = xp[:, None] * Pp[2] - Pp[0]
    A = np.stack([rows0, rows1, rows2], axis=1)          # (N, 3, 4)
    X = np.linalg.solve(A[:, :, :3], -A[:, :, 3:])[..., 0]
    good = np.all(np.isfinite(X), axis=1)
    return PointCloud(X[good], np.zeros(int(good.sum()), dtype=int))
