"""Report figures. Every plot is written next to the CSV it was drawn from."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 150,
}


def _figure(width=5.0, height=3.2):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path):
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_length_histogram(hist: Sequence[tuple[str, int, float]], path) -> Path:
    fig, ax = _figure()
    labels = [h[0] for h in hist]
    ax.bar(labels, [h[2] for h in hist], color="0.45")
    ax.set_xlabel("interactions per user")
    ax.set_ylabel("fraction of users")
    return _save(fig, path)


def plot_group_metrics(reports: Mapping[str, MetricsReport], metric: str, path) -> Path:
    """Grouped bars: one cluster per user group, one bar per model."""
    names = list(reports)
    first = reports[names[0]]
    groups = [g for g in first.groups if first.user_counts.get(g)]
    width = 0.8 / max(len(names), 1)
    fig, ax = _figure()
    for j, name in enumerate(names):
        xs = [i + (j - (len(names) - 1) / 2) * width for i in range(len(groups))]
        ax.bar(xs, [reports[name].groups[g][metric] for g in groups], width=width, label=name)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels([f"{g}\n(n={first.user_counts[g]})" for g in groups])
    ax.set_ylabel(metric)
    ax.legend()
    return _save(fig, path)


def plot_sweep(param: str, values: Sequence, series: Mapping[str, Sequence[float]], path) -> Path:
    fig, ax = _figure()
    xs = range(len(values))
    for name, ys in series.items():
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([str(v) for v in values])
    ax.set_xlabel(param)
    ax.legend()
    return _save(fig, path)
