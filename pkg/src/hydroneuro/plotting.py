"""Figures for the CLI. Every function returns a matplotlib Figure; the caller saves it."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def raster_figure(times: np.ndarray, sites: np.ndarray, n_sites: int, horizon: float):
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.scatter(times, sites, s=2, marker="|", color="k")
    ax.set_xlim(0, horizon)
    ax.set_ylim(-0.5, n_sites - 0.5)
    ax.set_xlabel("time")
    ax.set_ylabel("neuron index")
    ax.set_title(f"spike raster ({len(times)} spikes)")
    fig.tight_layout()
    return fig


def density_figure(fields: dict, cells: Sequence[int], ugrid: np.ndarray):
    """rho_t(., r) for a few r cells, one panel per cell, one curve per time."""
    cells = list(cells)
    fig, axes = plt.subplots(1, len(cells), figsize=(4 * len(cells), 3.5), squeeze=False)
    cmap = plt.get_cmap("viridis")
    times = sorted(fields)
    for ax, idx in zip(axes[0], cells):
        for k, t in enumerate(times):
            fld = fields[t]
            ax.plot(ugrid, fld.density(ugrid, idx), color=cmap(k / max(1, len(times) - 1)), label=f"t={t:g}")
        r = fields[times[0]].centers[idx]
        ax.set_title(f"r=({r[0]:.3g}, {r[1]:.3g})")
        ax.set_xlabel("u")
    axes[0][0].set_ylabel("density")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    return fig


def convergence_figure(report: dict):
    cells = [c for c in report["cells"] if not c["skipped"]]
    fig, ax = plt.subplots(figsize=(5, 4))
    if cells:
        eps = np.array([c["epsilon"] for c in cells])
        times = cells[0]["times"]
        for j, t in enumerate(times):
            if t == 0:
                continue
            mean = np.array([c["mean"][j] for c in cells])
            err = np.array([c["stderr"][j] for c in cells], dtype=float)
            ax.errorbar(eps, mean, yerr=np.nan_to_num(err), marker="o", capsize=3, label=f"t={t:g}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    ax.set_xlabel("epsilon")
    ax.set_ylabel("mean test-library distance")
    fig.tight_layout()
    return fig


def coupling_figure(report: dict):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for block in report["per_delta"]:
        n = [s["n"] for s in block["steps"]]
        ax1.plot(n, [s["theta_n"] for s in block["steps"]], marker=".", label=f"delta={block['delta']:g}")
        ax2.plot(n, [s["bad_fraction"] for s in block["steps"]], marker=".", label=f"delta={block['delta']:g}")
    ax1.set_xlabel("macro step n")
    ax1.set_ylabel("theta_n")
    ax2.set_xlabel("macro step n")
    ax2.set_ylabel("bad fraction")
    ax1.legend(fontsize=7)
    fig.tight_layout()
    return fig


def aux_figure(steps: np.ndarray, level_gap: np.ndarray, mass_gap: np.ndarray):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, level_gap, marker="o", label="max level gap")
    ax.plot(steps, mass_gap, marker="s", label="max mass gap")
    ax.set_xlabel("macro step n")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def close(fig) -> None:
    plt.close(fig)
