"""Figure rendering for training logs, evaluation tables, and DVF heatmaps.

Every report path that writes delimited output also renders matplotlib
figures next to it; everything uses the Agg backend so runs are headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import Volume  # noqa: E402

_METRICS = ("rmse", "psnr", "ssim", "nmi", "epe_mean")


def plot_history(rows, header, path, title: str) -> None:
    """Loss curves from trainer history rows."""
    arr = np.array([[float(x) for x in row] for row in rows], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in range(2, arr.shape[1]):
        ax.plot(arr[:, 0], arr[:, col], label=header[col])
    ax.set_xlabel("epoch")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_grade_boxes(rows, out_dir, reference: str = "fixed") -> list[str]:
    """Per-grade box plots of each metric, one figure per metric.

    Mirrors the phase-range grouping of the evaluation table: within each
    grade, one box per method.
    """
    out_dir = Path(out_dir)
    rows = [r for r in rows if r["reference"] == reference]
    methods = sorted({r["method"] for r in rows})
    grades = sorted({r["grade"] for r in rows})
    written = []
    for metric in _METRICS:
        fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(grades), 4))
        width = 0.8 / max(1, len(methods))
        for mi, method in enumerate(methods):
            data, positions = [], []
            for gi, grade in enumerate(grades):
                vals = [r[metric] for r in rows
                        if r["method"] == method and r["grade"] == grade
                        and np.isfinite(r[metric])]
                if vals:
                    data.append(vals)
                    positions.append(gi + (mi - (len(methods) - 1) / 2) * width)
            if not data:
                continue
            bp = ax.boxplot(data, positions=positions, widths=width * 0.9,
                            patch_artist=True, manage_ticks=False)
            color = plt.cm.tab10(mi % 10)
            for box in bp["boxes"]:
                box.set_facecolor(color)
                box.set_alpha(0.6)
            ax.plot([], [], color=color, label=method)
        ax.set_xticks(range(len(grades)))
        ax.set_xticklabels([f"grade {g}" for g in grades])
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} by phase range ({reference} reference)")
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3, axis="y")
        fig.tight_layout()
        out = out_dir / f"metrics_{metric}_{reference}.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(str(out))
    return written


def plot_heatmap_triptych(heat_coarse: Volume, heat_residual: Volume,
                          heat_final: Volume, path, z_index: int | None = None) -> None:
    """Stage-wise DVF magnitude maps side by side on one color scale."""
    vols = (heat_coarse, heat_residual, heat_final)
    names = ("coarse stage", "residual", "final")
    if z_index is None:
        z_index = vols[0].grid.dims[2] // 2
    vmax = max(float(v.data.max()) for v in vols) or 1.0
    fig, axes = plt.subplots(1, 3, figsize=(11, 4))
    for ax, vol, name in zip(axes, vols, names):
        im = ax.imshow(vol.data[:, :, z_index].T, origin="lower", cmap="jet",
                       vmin=0.0, vmax=vmax)
        ax.set_title(f"{name} |dvf| (z={z_index})")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    fig.colorbar(im, ax=axes, shrink=0.85, label="voxels")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def plot_slice_panel(volumes: dict[str, Volume], path, z_index: int | None = None,
                     window=(0.4, 0.8)) -> None:
    """Grayscale panel of named volumes at one transversal slice."""
    names = list(volumes)
    if z_index is None:
        z_index = volumes[names[0]].grid.dims[2] // 2
    lo = window[0] - window[1] / 2
    hi = window[0] + window[1] / 2
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.4))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        zi = min(z_index, volumes[name].grid.dims[2] - 1)
        ax.imshow(volumes[name].data[:, :, zi].T, origin="lower", cmap="gray",
                  vmin=lo, vmax=hi)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
