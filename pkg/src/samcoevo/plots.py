"""Deterministic SVG figures: mean-best curves, robustness violins and an
isometric voxel rendering of a morphology.

Files are byte-stable for identical inputs (fixed SVG id salt, no date
metadata).
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .coevolution import GenerationRecord  # noqa: E402
from .errors import MalformedRecord  # noqa: E402
from .experiment import RobustnessReport, mean_best_curve  # noqa: E402
from .morphology import VoxelGrid  # noqa: E402

ACTIVE_COLOR = "#d62728"
PASSIVE_COLOR = "#1f77b4"
KDE_NOTE = "density: Gaussian kernel, Silverman bandwidth"
_RC = {"svg.hashsalt": "samcoevo", "svg.fonttype": "path", "path.simplify": False}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def curves_from_records(records: dict[str, list[list[GenerationRecord]]]) -> dict[str, list[float]]:
    """Mean best-so-far curve per label; raises MalformedRecord on bad input."""
    if not records:
        raise MalformedRecord("no records to plot")
    curves = {}
    for label, runs in records.items():
        if not runs or any(len(r) == 0 for r in runs):
            raise MalformedRecord(f"{label}: empty run")
        try:
            curves[label] = mean_best_curve(runs)
        except ValueError as exc:
            raise MalformedRecord(f"{label}: {exc}") from exc
    return curves


def plot_curves(curves: dict[str, list[float]], path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label in sorted(curves):
            ax.plot(np.arange(len(curves[label])), curves[label], label=label)
        ax.set_xlabel("generation")
        ax.set_ylabel("mean best-so-far fitness")
        ax.legend(fontsize="small")
        fig.tight_layout()
        return _save(fig, path)


def plot_violins(reports: dict[str, RobustnessReport], path) -> Path:
    if not reports:
        raise MalformedRecord("no robustness reports to plot")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        labels = sorted(reports)
        for pos, label in enumerate(labels):
            rep = reports[label]
            dens = rep.density()
            if dens is not None:
                xs, d = dens
                half = 0.4 * d / d.max()
                ax.fill_betweenx(xs, pos - half, pos + half, color=PASSIVE_COLOR, alpha=0.5)
            ax.hlines([rep.minimum, rep.maximum], pos - 0.1, pos + 0.1, color="k")
            ax.vlines(pos, rep.minimum, rep.maximum, color="k", linewidth=0.8)
            ax.plot([pos], [rep.median], "o", color="w", markeredgecolor="k")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels)
        ax.set_ylabel("yz displacement")
        fig.text(0.01, 0.01, KDE_NOTE, fontsize="x-small")
        fig.tight_layout(rect=(0, 0.04, 1, 1))
        return _save(fig, path)


def render_grid(grid: VoxelGrid, path) -> Path:
    """Isometric voxel rendering; active red, passive blue."""
    if grid.count() == 0:
        raise MalformedRecord("empty grid")
    colors = np.empty(grid.cells.shape, dtype=object)
    colors[grid.active] = ACTIVE_COLOR
    colors[grid.passive] = PASSIVE_COLOR
    with plt.rc_context(_RC):
        fig = plt.figure(figsize=(6, 4))
        ax = fig.add_subplot(projection="3d", proj_type="ortho")
        ax.voxels(grid.present, facecolors=colors, edgecolor="k", linewidth=0.2)
        ax.view_init(elev=35.264, azim=-45)
        ax.set_box_aspect(grid.cells.shape)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_zlabel("z")
        return _save(fig, path)


def emit_plots(records: dict[str, list[list[GenerationRecord]]], out_dir,
               robustness: dict[str, RobustnessReport] | None = None,
               grids: dict[str, VoxelGrid] | None = None) -> list[Path]:
    """Write curves.svg, plus robustness.svg and morphology_<label>.svg when given."""
    out = Path(out_dir)
    paths = [plot_curves(curves_from_records(records), out / "curves.svg")]
    if robustness:
        paths.append(plot_violins(robustness, out / "robustness.svg"))
    for label, grid in sorted((grids or {}).items()):
        paths.append(render_grid(grid, out / f"morphology_{label}.svg"))
    return paths
