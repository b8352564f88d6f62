"""SVG figures: predictive curves and surfaces, partial dependence maps, sensitivity bars.

Figures are rendered with the Agg backend and saved with a fixed hash salt and
no date metadata, so the same inputs give the same file.
"""

from pathlib import Path
from typing import List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from dosetree.analytics.dependence import PartialDependence  # noqa: E402
from dosetree.analytics.predictive import PredictiveSummary  # noqa: E402
from dosetree.analytics.sensitivity import SensitivityReport  # noqa: E402
from dosetree.sampler import PosteriorChain  # noqa: E402

plt.rcParams["svg.hashsalt"] = "dosetree"

PathLike = Union[str, Path]


def save_figure(fig: Figure, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _dose_axis(ax: plt.Axes, doses: np.ndarray) -> None:
    positive = doses[doses > 0]
    if positive.size and positive.max() / positive.min() > 50:
        ax.set_xscale("symlog", linthresh=float(positive.min()))
    ax.set_xlabel("dose")


def plot_predictive(
    summary: PredictiveSummary,
    particle: str,
    observed: Optional[np.ndarray] = None,
    n_dose: Optional[int] = None,
) -> Figure:
    """Mean curve with its band (dose-only data) or lower/mean/upper surfaces (dose x time).

    ``observed`` holds replicate profiles ``(K, n_cells)``; ``NaN`` cells are skipped.
    """
    times = np.unique(summary.time)
    if times.size == 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.fill_between(summary.dose, summary.lower, summary.upper, alpha=0.3,
                        label=f"{summary.level:.0%} interval")
        ax.plot(summary.dose, summary.mean, color="C0", label="predictive mean")
        if observed is not None:
            for k, profile in enumerate(np.atleast_2d(observed)):
                seen = ~np.isnan(profile)
                ax.scatter(summary.dose[seen], profile[seen], s=12, color="k",
                           label="replicates" if k == 0 else None)
        _dose_axis(ax, summary.dose)
        ax.set_ylabel("response")
        ax.set_title(particle)
        ax.legend(loc="best", fontsize="small")
        fig.tight_layout()
        return fig

    n_dose = n_dose or summary.dose.size // times.size
    shape = (n_dose, times.size)
    doses = summary.dose.reshape(shape)[:, 0]
    panels = [("lower", summary.lower), ("mean", summary.mean), ("upper", summary.upper)]
    low = float(summary.lower.min())
    high = float(summary.upper.max())
    fig, axes = plt.subplots(1, 3, figsize=(13, 4), sharey=True)
    for ax, (name, values) in zip(axes, panels):
        mesh = ax.pcolormesh(np.arange(times.size), np.arange(n_dose), values.reshape(shape),
                             vmin=low, vmax=high, shading="nearest", cmap="viridis")
        ax.set_xticks(np.arange(times.size), [f"{t:g}" for t in times])
        ax.set_xlabel("time")
        ax.set_title(f"{particle}: {name}")
    axes[0].set_yticks(np.arange(n_dose), [f"{d:g}" for d in doses])
    axes[0].set_ylabel("dose")
    fig.colorbar(mesh, ax=axes, shrink=0.8, label="response")
    return fig


def plot_partial_dependence(
    pd_result: PartialDependence,
    projections: Optional[np.ndarray] = None,
    log_scale: Sequence[bool] = (),
) -> Figure:
    """Partial dependence map.

    Two-variable results become a heatmap over both covariate grids (averaged
    over cells when more than one cell was computed) with the training
    particles' covariates overlaid. One-variable results plot the covariate
    against the dose-time cells, or a single curve at one point.
    """
    fig, ax = plt.subplots(figsize=(6, 5))
    values = pd_result.values
    if len(pd_result.grids) == 2:
        surface = values.mean(axis=-1)
        first, second = pd_result.grids
        mesh = ax.pcolormesh(first, second, surface.T, shading="nearest", cmap="viridis")
        fig.colorbar(mesh, ax=ax, label="partial dependence")
        if projections is not None:
            ax.scatter(projections[:, 0], projections[:, 1], s=14, c="white", edgecolors="k",
                       label="training particles")
            ax.legend(loc="best", fontsize="small")
        ax.set_xlabel(pd_result.names[0])
        ax.set_ylabel(pd_result.names[1])
        for flag, setter in zip(log_scale, (ax.set_xscale, ax.set_yscale)):
            if flag and min(first.min(), second.min()) > 0:
                setter("log")
    elif values.shape[-1] == 1:
        ax.plot(pd_result.grids[0], values[:, 0])
        if projections is not None:
            ax.plot(projections[:, 0], np.full(projections.shape[0], values.min()), "|k", ms=12)
        ax.set_xlabel(pd_result.names[0])
        ax.set_ylabel("partial dependence")
        if log_scale and log_scale[0] and pd_result.grids[0].min() > 0:
            ax.set_xscale("log")
    else:
        mesh = ax.pcolormesh(pd_result.grids[0], np.arange(values.shape[-1]), values.T,
                             shading="nearest", cmap="viridis")
        fig.colorbar(mesh, ax=ax, label="partial dependence")
        labels = [
            f"{d:g}" if t == 0 else f"{d:g}/{t:g}" for d, t in zip(pd_result.dose, pd_result.time)
        ]
        step = max(1, len(labels) // 12)
        ax.set_yticks(np.arange(len(labels))[::step], labels[::step])
        ax.set_xlabel(pd_result.names[0])
        ax.set_ylabel("dose" if np.all(pd_result.time == 0) else "dose/time")
        if projections is not None:
            ax.plot(projections[:, 0], np.zeros(projections.shape[0]), "|w", ms=12)
    ax.set_title("Partial dependence")
    fig.tight_layout()
    return fig


def plot_sensitivity(report: SensitivityReport) -> Figure:
    """First-order and total indices per covariate with two-standard-error bars."""
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(report.names) + 2), 4))
    x = np.arange(len(report.names))
    width = 0.38
    ax.bar(x - width / 2, report.first, width, yerr=2 * report.first_se, capsize=3, label="S")
    ax.bar(x + width / 2, report.total, width, yerr=2 * report.total_se, capsize=3, label="T")
    ax.set_xticks(x, list(report.names), rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("index")
    ax.set_title("First order (S) and total (T) sensitivity indices")
    ax.legend()
    fig.tight_layout()
    return fig


def plot_trace(chains: List[PosteriorChain]) -> Figure:
    """Log-posterior trace of every chain."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for chain in chains:
        trace = chain.log_post_trace
        ax.plot(np.arange(1, trace.size + 1), trace, lw=0.6, label=f"chain {chain.chain_id}")
    if chains:
        ax.axvline(chains[0].config.burn_in, color="k", ls=":", lw=0.8)
    ax.set_xlabel("sweep")
    ax.set_ylabel("log posterior")
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    return fig
