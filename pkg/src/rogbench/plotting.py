"""Figure rendering for benchmark reports.

Uses the Agg backend so figures render to files in headless environments.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def plot_dice_curves(
    series: dict[str, tuple[list[float], list[float]]],
    out_path,
    *,
    title: str,
    xlabel: str = "perturbation budget (fraction of intensity range)",
    ylabel: str = "mean Dice",
    tick_labels: dict[float, str] | None = None,
) -> Path:
    """One Dice-vs-epsilon line per labelled series, written to ``out_path``.

    ``tick_labels`` optionally maps x positions to display strings, so budgets
    can be shown as exact fractions like 8/255.
    """
    if not series:
        raise ValueError("nothing to plot")
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(5.5, 4.0), dpi=150)
    for label in sorted(series):
        xs, ys = series[label]
        ax.plot(xs, ys, marker="o", linewidth=1.5, markersize=4, label=label)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    if tick_labels:
        ticks = sorted(tick_labels)
        ax.set_xticks(ticks)
        ax.set_xticklabels([tick_labels[t] for t in ticks])
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Software": None})
    plt.close(fig)
    return out_path
