"""Report figures, rendered off-screen to PNG."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}


def new(ncols=1, nrows=1, width=6.0, height=3.6):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(nrows=nrows, ncols=ncols, figsize=(width, height))
    return fig, ax


def save(fig, path):
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def residual_histogram(residuals, path, label="residual (mm)", title=None):
    r = np.asarray(residuals)
    fig, ax = new()
    ax.hist(r, bins=80, color="0.35")
    ax.axvline(0, color="k", lw=0.8)
    rms = float(np.sqrt(np.mean(r ** 2))) if len(r) else float("nan")
    ax.set_xlabel(label)
    ax.set_ylabel("count")
    ax.set_title(title or f"RMS {rms:.4f}")
    return save(fig, path)


def plane_residual_map(points, residuals, path):
    """Top view coloured by signed distance to the fitted plane."""
    P = np.asarray(points)
    fig, ax = new(width=5.5, height=4.2)
    step = max(1, len(P) // 40000)
    lim = np.percentile(np.abs(residuals), 99) if len(P) else 1.0
    sc = ax.scatter(P[::step, 0], P[::step, 1], c=residuals[::step], s=1, cmap="coolwarm", vmin=-lim, vmax=lim)
    ax.set_aspect("equal")
    ax.invert_yaxis()
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    fig.colorbar(sc, ax=ax, label="distance (mm)")
    return save(fig, path)


def cr_bars(table, path):
    """CR1 / CR2 per trial pixel."""
    names = [k for k in table if k != "mean"]
    c1 = [table[k][0] for k in names]
    c2 = [table[k][1] for k in names]
    x = np.arange(len(names))
    fig, ax = new()
    ax.bar(x - 0.18, c1, 0.36, label="CR1", color="0.3")
    ax.bar(x + 0.18, c2, 0.36, label="CR2", color="0.7")
    ax.set_xticks(x)
    ax.set_xticklabels([n.replace("_", "\n") for n in names])
    ax.set_ylabel("mm")
    ax.legend(frameon=False)
    return save(fig, path)


def fused_views(sl_points, us_points, path):
    """Side (x-z) and end (y-z) views of both modalities; depth grows downward."""
    fig, axes = new(ncols=2, width=9.0, height=4.0)
    sl = np.asarray(sl_points)
    us = np.asarray(us_points)
    step = max(1, len(sl) // 30000)
    for ax, (i, j) in zip(axes, ((0, 2), (1, 2))):
        if len(sl):
            ax.scatter(sl[::step, i], sl[::step, j], s=0.5, c="0.6", label="SL")
        if len(us):
            ax.scatter(us[:, i], us[:, j], s=0.5, c="C3", label="US")
        ax.set_aspect("equal")
        ax.invert_yaxis()
        ax.set_xlabel("xyz"[i] + " (mm)")
        ax.set_ylabel("z (mm)")
    axes[0].legend(frameon=False, markerscale=10)
    return save(fig, path)


def probe_residuals(frame_residuals, path):
    """Per-frame residual norms of each probe calibration."""
    fig, ax = new()
    for i, r in enumerate(frame_residuals):
        ax.plot(np.arange(len(r)), r, ".-", lw=0.8, label=f"cal {i}")
    ax.set_xlabel("frame")
    ax.set_ylabel("residual (mm)")
    ax.legend(frameon=False, ncol=3)
    return save(fig, path)
