"""Static figures for run reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PANEL_METRICS = (("fd_target", "Frechet distance to target"), ("kid_e3", "KID x 1e3"),
                 ("intra_div", "intra-cluster diversity"), ("incompat_mass", "incompatible mode mass"))

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _figure(ncols: int, width: float = 3.2, height: float = 2.6):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
    return fig, axes[0]


def summary_bars(table: Sequence[dict], path: str | Path) -> None:
    """One bar panel per metric: median across seeds with IQR whiskers."""
    with plt.rc_context(STYLE):
        fig, axes = _figure(len(PANEL_METRICS))
        methods = [r["method"] for r in table]
        x = np.arange(len(methods))
        for ax, (key, title) in zip(axes, PANEL_METRICS):
            med = [r[key] for r in table]
            iqr = [r[f"{key}_iqr"] / 2 for r in table]
            ax.bar(x, med, yerr=iqr, color="0.6", edgecolor="0.2", capsize=2)
            ax.set_xticks(x)
            ax.set_xticklabels(methods, rotation=60, ha="right")
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def metric_trajectories(run_dirs: Sequence[Path], path: str | Path) -> None:
    """Median metric vs. iteration, one line per method."""
    from .harness import trajectory

    with plt.rc_context(STYLE):
        fig, axes = _figure(len(PANEL_METRICS))
        for ax, (key, title) in zip(axes, PANEL_METRICS):
            for method, per in trajectory(run_dirs, key).items():
                its = sorted(per)
                ax.plot(its, [per[i] for i in its], marker="o", ms=2.5, lw=1, label=method)
            ax.set_xlabel("iteration")
            ax.set_title(title)
        axes[-1].legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def point_snapshots(snapshots: dict[str, np.ndarray], path: str | Path, centers: np.ndarray | None = None,
                    labels: Sequence[str] | None = None) -> None:
    """Scatter fixed-latent samples for the point testbed, one panel per snapshot."""
    with plt.rc_context(STYLE):
        fig, axes = _figure(len(snapshots), width=2.6, height=2.6)
        colors = {"shared": "tab:green", "source-only": "tab:red", "target-only": "tab:blue"}
        for ax, (name, x) in zip(axes, snapshots.items()):
            if centers is not None:
                for c, lab in zip(centers, labels or ["shared"] * len(centers)):
                    ax.scatter(*c[:2], marker="x", s=30, color=colors.get(lab, "k"))
            ax.scatter(x[:, 0], x[:, 1], s=6, color="k", alpha=0.7)
            ax.set_title(name)
            ax.set_aspect("equal")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def icon_grid(x: np.ndarray, path: str | Path, ncols: int = 8) -> None:
    """Tile 8x8 icons (flattened, values in [-1, 1]) into one image."""
    n = len(x)
    nrows = int(np.ceil(n / ncols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(ncols * 0.6, nrows * 0.6), squeeze=False)
        for i, ax in enumerate(axes.ravel()):
            ax.axis("off")
            if i < n:
                ax.imshow(x[i].reshape(8, 8), cmap="gray", vmin=-1, vmax=1)
        fig.savefig(path)
        plt.close(fig)
