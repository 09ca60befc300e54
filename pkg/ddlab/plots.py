"""
SVG figures for sample batches, trajectories and sweeps.

All figures use a fixed 640x640 px canvas, data range [-6, 6]^2 for point
plots and one color per model role. Output is byte-stable: the SVG id salt is
fixed and no date metadata is written.
"""
import io
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ddlab.diffusion.sampler import Trajectory  # noqa: E402

CANVAS_INCHES = 6.4
DPI = 100
DATA_RANGE = (-6.0, 6.0)
MAX_SCATTER_POINTS = 4000

ROLE_COLORS: Dict[str, str] = {
    "truth": "#7f7f7f",
    "base": "#1f77b4",
    "distilled": "#d62728",
    "hybrid": "#9467bd",
    "skip": "#ff7f0e",
    "lora": "#2ca02c",
    "oracle": "#8c564b",
}

plt.rcParams["svg.hashsalt"] = "ddlab"
plt.rcParams["svg.fonttype"] = "none"


def _figure(n_panels: int = 1):
    fig, axes = plt.subplots(1, n_panels, figsize=(CANVAS_INCHES, CANVAS_INCHES), dpi=DPI, squeeze=False)
    return fig, list(axes[0])


def _to_svg(fig) -> bytes:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buffer.getvalue()


def _square(ax, title: Optional[str] = None):
    ax.set_xlim(*DATA_RANGE)
    ax.set_ylim(*DATA_RANGE)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title, fontsize=9)


def _color(role: str) -> str:
    return ROLE_COLORS.get(role, "#17becf")


def scatter_svg(groups: Sequence[Tuple[str, np.ndarray]], title: str = "") -> bytes:
    """
    Overlay point clouds, each colored by its role name.

    At most the first 4,000 points of each group are drawn.
    """
    fig, (ax,) = _figure()
    for role, points in groups:
        points = np.asarray(points).reshape(-1, 2)[:MAX_SCATTER_POINTS]
        ax.scatter(points[:, 0], points[:, 1], s=2, alpha=0.5, color=_color(role), label=role, linewidths=0)
    _square(ax, title)
    ax.legend(loc="upper right", fontsize=8, markerscale=4)
    return _to_svg(fig)


def scatter_grid_svg(panels: Sequence[Tuple[str, str, np.ndarray]]) -> bytes:
    """One small scatter panel per (title, role, points) entry, side by side."""
    fig, axes = _figure(len(panels))
    for ax, (title, role, points) in zip(axes, panels):
        points = np.asarray(points).reshape(-1, 2)[:MAX_SCATTER_POINTS]
        ax.scatter(points[:, 0], points[:, 1], s=1, alpha=0.5, color=_color(role), linewidths=0)
        _square(ax, title)
        ax.tick_params(labelsize=6)
    return _to_svg(fig)


def trajectory_svg(trajectory: Trajectory, n_chains: int = 8, title: str = "") -> bytes:
    """
    States x_t (solid) next to clean estimates (dashed) for the first chains.

    Markers are colored by the role that produced each step.
    """
    fig, (left, right) = _figure(2)
    shown = min(n_chains, trajectory.n_chains)
    for c in range(shown):
        states = np.vstack([trajectory.states[:, c], trajectory.x0[c][None, :]])
        left.plot(states[:, 0], states[:, 1], "-", color="#bbbbbb", linewidth=0.8)
        right.plot(trajectory.dt[:, c, 0], trajectory.dt[:, c, 1], "--", color="#bbbbbb", linewidth=0.8)
        for r, role in enumerate(trajectory.roles):
            left.plot(*trajectory.states[r, c], "o", markersize=2.5, color=_color(role))
            right.plot(*trajectory.dt[r, c], "o", markersize=2.5, color=_color(role))
        left.plot(*trajectory.x0[c], "*", markersize=6, color="black")
        right.plot(*trajectory.x0[c], "*", markersize=6, color="black")
    _square(left, f"{title} states".strip())
    _square(right, f"{title} clean estimates".strip())
    for ax in (left, right):
        ax.tick_params(labelsize=6)
    return _to_svg(fig)


def line_svg(
    x: Sequence[float],
    series: Dict[str, Sequence[float]],
    xlabel: str,
    ylabel: str,
    title: str = "",
) -> bytes:
    """Line plot of one or more named series over shared x values."""
    fig, (ax,) = _figure()
    for name, values in series.items():
        ax.plot(list(x), list(values), "o-", label=name, color=_color(name))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _to_svg(fig)


def dt_curves_svg(curves: Dict[str, Tuple[List[float], List[float]]]) -> bytes:
    """Normalized clean-estimate distance vs step fraction, one line per model."""
    fig, (ax,) = _figure()
    for role, (fractions, distances) in curves.items():
        ax.plot(fractions, distances, "o-", label=role, color=_color(role), markersize=3)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("step fraction")
    ax.set_ylabel("normalized distance to final sample")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _to_svg(fig)
