"""Figure rendering for the report paths.

Figures are written straight to files (Agg backend); the delimited outputs
remain the canonical record, these are the quick-look companions.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def variance_reduction_figure(groups, out_path, title=None):
    """Distribution of per-replication variance reduction per cell.

    ``groups`` is a list of ``(label, values)`` pairs, one box per cell;
    the dot marks the mean and the triangle the median.
    """
    labels = [label for label, _ in groups]
    series = [np.asarray(values)[~np.isnan(np.asarray(values))] for _, values in groups]
    width = max(6.0, 1.1 * len(groups) + 2.0)
    fig, ax = plt.subplots(figsize=(width, 4.5))
    ax.boxplot(series, tick_labels=labels, showfliers=False, whis=(5, 95))
    positions = np.arange(1, len(series) + 1)
    means = [s.mean() if s.size else np.nan for s in series]
    medians = [np.median(s) if s.size else np.nan for s in series]
    ax.plot(positions, means, "o", color="C0", label="mean")
    ax.plot(positions, medians, "^", color="C1", label="median")
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.set_ylabel("% variance reduction (weighted vs unweighted adjusted)")
    ax.legend(loc="best", frameon=False)
    if title:
        ax.set_title(title)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def analysis_forest_figure(results, out_path, title=None):
    """Treatment-effect estimates with confidence intervals, one row per method."""
    fig, ax = plt.subplots(figsize=(6.5, 1.0 + 0.7 * len(results)))
    ys = np.arange(len(results))[::-1]
    for y, res in zip(ys, results):
        ax.errorbar(
            res.effect_estimate,
            y,
            xerr=[[res.effect_estimate - res.ci_low], [res.ci_high - res.effect_estimate]],
            fmt="o",
            color="C0",
            capsize=3,
        )
    ax.axvline(0.0, color="0.6", lw=0.8)
    ax.set_yticks(ys)
    ax.set_yticklabels([res.method for res in results])
    ax.set_xlabel("treatment effect estimate")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
