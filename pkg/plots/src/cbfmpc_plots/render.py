"""Render feasibility maps and barrier-evolution figures from experiment CSVs.

Inputs are the CSV artifacts written by the cbfmpc experiment runner:

* grid CSVs        x, v, a, feasible, status, violation, solve_ms
* trajectory CSVs  t, x, v, a, j, h, V, status, objective, omega, slack, solve_ms

Rendering is deterministic: a pinned style sheet, fixed figure geometry, and
constant metadata, so identical inputs yield identical pixels.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .jobs import GRID_COLUMNS, TRAJECTORY_COLUMNS, PlotJob, read_csv_columns

_STYLE = Path(__file__).with_name("style.mplstyle")
_SAVE_KW = dict(metadata={"Software": "cbfmpc-plots"})


def _grid_points(path: Path):
    cols = read_csv_columns(path, GRID_COLUMNS)
    pts = np.array([[float(x), float(v), float(a)]
                    for x, v, a in zip(cols["x"], cols["v"], cols["a"])])
    feas = np.array([c == "1" for c in cols["feasible"]], dtype=bool)
    return pts, feas


def _finalize(fig, ax, job: PlotJob, default_title: str):
    ax.set_title(job.title or default_title)
    if job.axis_limits:
        lims = job.axis_limits
        ax.set_xlim(*lims[0])
        if len(lims) > 1:
            ax.set_ylim(*lims[1])
        if len(lims) > 2 and hasattr(ax, "set_zlim"):
            ax.set_zlim(*lims[2])
    job.output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(job.output, **_SAVE_KW)
    plt.close(fig)
    return job.output


def _axis_names(job: PlotJob, default):
    names = job.axis_labels or default
    if len(names) < len(default):
        names = list(names) + list(default[len(names):])
    return names


def _scatter_axes(fig):
    ax = fig.add_subplot(projection="3d")
    ax.view_init(elev=18, azim=-60)
    return ax


def render(job: PlotJob) -> Path:
    """Render one job to its output image; returns the written path."""
    with plt.style.context(str(_STYLE)):
        if job.kind == "feasibility_map":
            return _render_feasibility_map(job)
        if job.kind == "overlay_compare":
            return _render_overlay(job)
        return _render_barrier_evolution(job)


def _render_feasibility_map(job: PlotJob) -> Path:
    pts, feas = _grid_points(job.inputs[0])
    fig = plt.figure()
    ax = _scatter_axes(fig)
    label = job.labels[0] if job.labels else "feasible"
    if pts.size:
        sel = pts[feas]
        ax.scatter(sel[:, 0], sel[:, 1], sel[:, 2], marker="o", s=22,
                   facecolors="none", edgecolors="tab:blue", label=label)
    else:
        warnings.warn(f"{job.inputs[0]}: no data rows, rendering empty axes")
    names = _axis_names(job, ["x", "v", "a"])
    ax.set_xlabel(names[0])
    ax.set_ylabel(names[1])
    ax.set_zlabel(names[2])
    ax.legend(loc="upper left")
    return _finalize(fig, ax, job, "Feasible states")


def _render_overlay(job: PlotJob) -> Path:
    pts_a, feas_a = _grid_points(job.inputs[0])
    pts_b, feas_b = _grid_points(job.inputs[1])
    labels = job.labels or [job.inputs[0].stem, job.inputs[1].stem]
    fig = plt.figure()
    ax = _scatter_axes(fig)
    if pts_b.size:
        sel = pts_b[feas_b]
        ax.scatter(sel[:, 0], sel[:, 1], sel[:, 2], marker="o", s=34,
                   facecolors="none", edgecolors="tab:blue", label=labels[1])
    if pts_a.size:
        sel = pts_a[feas_a]
        ax.scatter(sel[:, 0], sel[:, 1], sel[:, 2], marker=".", s=16,
                   color="tab:red", label=labels[0])
    if not pts_a.size and not pts_b.size:
        warnings.warn("both grid CSVs are empty, rendering empty axes")
    names = _axis_names(job, ["x", "v", "a"])
    ax.set_xlabel(names[0])
    ax.set_ylabel(names[1])
    ax.set_zlabel(names[2])
    ax.legend(loc="upper left")
    return _finalize(fig, ax, job, "Feasible-set comparison")


def _render_barrier_evolution(job: PlotJob) -> Path:
    fig, ax = plt.subplots()
    any_data = False
    for i, path in enumerate(job.inputs):
        cols = read_csv_columns(path, TRAJECTORY_COLUMNS)
        t = np.array([float(v) for v in cols["t"]])
        hv = np.array([float(v) if v else np.nan for v in cols["h"]])
        label = job.labels[i] if job.labels else path.stem
        if t.size:
            any_data = True
            ax.plot(t, hv, label=label)
            if cols["status"] and cols["status"][-1] == "infeasible":
                ax.plot(t[-1:], hv[-1:], marker="x", color="black", markersize=8)
    if not any_data:
        warnings.warn("all trajectory CSVs are empty, rendering empty axes")
    names = _axis_names(job, ["t [s]", "h(x)"])
    ax.set_xlabel(names[0])
    ax.set_ylabel(names[1])
    if any_data:
        ax.legend()
    return _finalize(fig, ax, job, "Barrier evolution")
