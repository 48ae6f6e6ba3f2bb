"""Report figures: frame and parametric-map montages, curves and sampler traces.

Figures are built on the object API with an Agg canvas so nothing touches
pyplot state and output does not depend on a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

PNG_META = {"Software": None}


def _save(fig: Figure, path: Path | str, dpi: int = 110) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=dpi, metadata=PNG_META)
    return path


def central_slice(volume: np.ndarray, axis: int = 0, index: int | None = None) -> np.ndarray:
    volume = np.asarray(volume)
    index = volume.shape[axis] // 2 if index is None else index
    return np.take(volume, index, axis=axis)


def frame_montage(
    studies: dict[str, np.ndarray],
    frames,
    path: Path | str,
    frame_labels: list[str] | None = None,
    reference: str | None = None,
    slice_index: int | None = None,
) -> Path:
    """Rows are studies ([F, Z, Y, X] arrays), columns are frames.

    Each column shares one grey scale, taken from ``reference`` when given.
    """
    names = list(studies)
    frames = list(frames)
    ref = reference if reference in studies else names[0]
    fig = Figure(figsize=(1.6 * len(frames) + 0.6, 1.6 * len(names) + 0.4))
    axes = fig.subplots(len(names), len(frames), squeeze=False)
    for j, f in enumerate(frames):
        vmax = float(np.nanmax(central_slice(studies[ref][f], index=slice_index))) or 1.0
        for i, name in enumerate(names):
            ax = axes[i, j]
            ax.imshow(central_slice(studies[name][f], index=slice_index), cmap="gray_r", vmin=0, vmax=vmax,
                      interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(frame_labels[j] if frame_labels else f"frame {f}", fontsize=8)
            if j == 0:
                ax.set_ylabel(name, fontsize=8)
    fig.tight_layout(pad=0.3)
    return _save(fig, path)


def map_montage(
    maps: dict[str, np.ndarray],
    path: Path | str,
    title: str = "K1 (ml/min/g)",
    vmax: float | None = None,
    slice_index: int | None = None,
) -> Path:
    """Central slices of parametric maps side by side with a shared colour bar."""
    names = list(maps)
    slices = [np.nan_to_num(central_slice(maps[n], index=slice_index)) for n in names]
    if vmax is None:
        vmax = max(float(np.max(s)) for s in slices) or 1.0
    fig = Figure(figsize=(2.2 * len(names) + 0.8, 2.5))
    axes = fig.subplots(1, len(names), squeeze=False)[0]
    im = None
    for ax, name, sl in zip(axes, names, slices):
        im = ax.imshow(sl, cmap="inferno", vmin=0, vmax=vmax, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    cbar = fig.colorbar(im, ax=list(axes), shrink=0.85)
    cbar.set_label(title, fontsize=8)
    return _save(fig, path)


def curve_plot(
    times_s: np.ndarray,
    curves: dict[str, np.ndarray],
    path: Path | str,
    ylabel: str = "activity (kBq/mL)",
    title: str = "",
) -> Path:
    fig = Figure(figsize=(5.0, 3.2))
    ax = fig.subplots()
    for name, c in curves.items():
        ax.plot(times_s, c, marker="o", ms=2.5, lw=1.0, label=name)
    ax.set_xlabel("time (s)")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def trace_plot(trace: dict[str, np.ndarray], path: Path | str, title: str = "") -> Path:
    """Residual and step weight against the diffusion step, log scale."""
    t = trace["t"]
    fig = Figure(figsize=(5.0, 3.8))
    ax1, ax2 = fig.subplots(2, 1, sharex=True)
    ax1.semilogy(t, trace["residual2"], lw=1.0)
    ax1.set_ylabel(r"$\|y-\hat{x}_0\|^2$")
    rho = np.where(trace["rho"] > 0, trace["rho"], np.nan)
    ax2.semilogy(t, rho, lw=1.0, color="C1")
    ax2.set_ylabel(r"$\rho_t$")
    ax2.set_xlabel("step t")
    ax2.invert_xaxis()
    if title:
        ax1.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def metric_bars(rows: dict[str, dict[str, float]], path: Path | str, keys=("psnr_db", "ssim")) -> Path:
    """Grouped bars of aggregate metrics per method."""
    names = list(rows)
    fig = Figure(figsize=(2.4 * len(keys) + 0.6, 2.8))
    axes = fig.subplots(1, len(keys), squeeze=False)[0]
    for ax, key in zip(axes, keys):
        vals = [rows[n][key] for n in names]
        ax.bar(range(len(names)), vals, color=[f"C{i}" for i in range(len(names))])
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, fontsize=8)
        ax.set_title(key, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
