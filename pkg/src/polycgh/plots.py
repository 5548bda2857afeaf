"""Report figures rendered to files next to the CSV outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_traces(traces: list[list[dict]], path, labels: list[str] | None = None) -> None:
    """Loss curves (log scale) for one or more optimization traces."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, trace in enumerate(traces):
        its = [row["iteration"] for row in trace]
        vals = [row["loss"] for row in trace]
        label = labels[i] if labels else (f"problem {i}" if len(traces) > 1 else None)
        ax.semilogy(its, vals, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss (MSE)")
    ax.grid(True, alpha=0.3)
    if labels or len(traces) > 1:
        ax.legend(fontsize=8)
    _save(fig, path)


def plot_planes(images: list[dict], path, key: str = "srgb_linear") -> None:
    """Per-plane result montage (gamma-encoded for display)."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2))
    if n == 1:
        axes = [axes]
    for ax, entry in zip(axes, images):
        data = entry[key]
        arr = torch.as_tensor(data).clamp(0.0, 1.0).numpy() ** (1 / 2.2)
        ax.imshow(arr)
        ax.set_title(f"z = {entry['plane_m'] * 1e3:.2f} mm", fontsize=9)
        ax.axis("off")
    _save(fig, path)


def plot_heatmap(n_wavelengths: list[int], spacings_nm: list[float],
                 psnr: np.ndarray, path) -> None:
    """Sweep heatmap: rows = wavelength counts, columns = spacings."""
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(psnr, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(spacings_nm)), [f"{s:g}" for s in spacings_nm])
    ax.set_yticks(range(len(n_wavelengths)), [str(n) for n in n_wavelengths])
    ax.set_xlabel("wavelength spacing (nm)")
    ax.set_ylabel("number of wavelengths")
    for i in range(len(n_wavelengths)):
        for j in range(len(spacings_nm)):
            v = psnr[i, j]
            if math.isfinite(v):
                ax.text(j, i, f"{v:.1f}", ha="center", va="center", fontsize=8,
                        color="white" if v < np.nanmax(psnr) - 1 else "black")
    fig.colorbar(im, ax=ax, label="PSNR (dB)")
    _save(fig, path)


def plot_correlation(rows: list[dict], path) -> None:
    """Memory-effect correlation curves grouped by (sweep kind, gap)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    groups: dict[tuple, list[tuple[float, float]]] = {}
    for row in rows:
        groups.setdefault((row["sweep"], row["gap_mm"]), []).append(
            (row["delta"], row["correlation"])
        )
    for (sweep, gap), pts in sorted(groups.items()):
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        if sweep == "wavelength":
            xs = [x * 1e9 for x in xs]
            label = f"wavelength sweep, gap {gap:g} mm"
        else:
            label = f"tilt sweep, gap {gap:g} mm"
        ax.plot(xs, ys, marker="o", ms=3, label=label)
    ax.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("parameter delta (nm for wavelength, rad/m for tilt)")
    ax.set_ylabel("correlation peak")
    ax.set_ylim(-0.05, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_calibration(report: dict, path) -> None:
    """Held-out PSNR before/after versus wavelength, plus fit trace."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for label, key in (("initial", "before"), ("fitted", "after")):
        rows = [r for r in report[key]["per_pair"] if r["held_out"]]
        axes[0].plot(
            [r["wavelength_nm"] for r in rows],
            [r["psnr_db"] for r in rows],
            marker="o", ms=4, lw=1, label=label,
        )
    axes[0].set_xlabel("wavelength (nm)")
    axes[0].set_ylabel("held-out PSNR (dB)")
    axes[0].grid(True, alpha=0.3)
    axes[0].legend()
    trace = report.get("trace", [])
    axes[1].semilogy([r["iteration"] for r in trace], [r["loss"] for r in trace])
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("fit loss")
    axes[1].grid(True, alpha=0.3)
    _save(fig, path)
