"""Figure rendering for experiment reports.

Renders the bootstrap comparison panels next to the delimited output:
per-fold dots with a mean diamond for each condition, and the per-fold
lift of the transferred model with the remote model as reference.  PNG
metadata is pinned so repeated runs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import BootstrapLiftReport, CONDITIONS, METRIC_NAMES

_COLORS = {"local": "#1f77b4", "remote": "#d62728", "transferred": "#2ca02c"}
_PNG_META = {"Software": "portrisk"}


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def render_fold_performance(boot: BootstrapLiftReport, direction: str,
                            path: str | Path) -> None:
    """One panel per metric: fold-level dots per condition, mean as diamond."""
    fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(9, 3.6), sharex=True)
    for ax, metric in zip(axes, METRIC_NAMES):
        for i, cond in enumerate(CONDITIONS):
            values = [f.metrics[cond][metric] for f in boot.folds]
            ax.scatter([i] * len(values), values, s=18, alpha=0.65,
                       color=_COLORS[cond], label=None)
            ax.scatter([i], [boot.mean_metric(cond, metric)], marker="D", s=60,
                       color=_COLORS[cond], edgecolor="black", zorder=3)
        ax.set_xticks(range(len(CONDITIONS)))
        ax.set_xticklabels(CONDITIONS)
        ax.set_title(metric.upper())
        ax.grid(axis="y", alpha=0.3)
    fig.suptitle(f"Bootstrap fold performance ({direction})")
    fig.tight_layout()
    _save(fig, Path(path))


def render_fold_lift(boot: BootstrapLiftReport, direction: str,
                     path: str | Path) -> None:
    """Per-fold percent lift over the local baseline, per metric."""
    fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(9, 3.6))
    for ax, metric in zip(axes, METRIC_NAMES):
        for i, cond in enumerate(("transferred", "remote")):
            lifts = [f.lift_pct(cond, metric) for f in boot.folds]
            ax.scatter([i] * len(lifts), lifts, s=18, alpha=0.65,
                       color=_COLORS[cond])
            ax.scatter([i], [boot.mean_lift_pct(cond, metric)], marker="D",
                       s=60, color=_COLORS[cond], edgecolor="black", zorder=3)
        ax.axhline(0.0, color="gray", lw=0.8)
        ax.set_xticks([0, 1])
        ax.set_xticklabels(["transferred", "remote"])
        ax.set_title(f"{metric.upper()} lift over local (%)")
        ax.grid(axis="y", alpha=0.3)
    fig.suptitle(f"Bootstrap lift over local baseline ({direction})")
    fig.tight_layout()
    _save(fig, Path(path))


def render_bootstrap_figures(boot: BootstrapLiftReport, direction: str,
                             out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    perf = out / "fold_performance.png"
    lift = out / "fold_lift.png"
    render_fold_performance(boot, direction, perf)
    render_fold_lift(boot, direction, lift)
    return [perf, lift]
