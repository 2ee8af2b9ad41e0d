"""Figures for the evaluate command.  Rendering only; no metrics are computed here."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLORS = ["#1f3a93", "#c0392b", "#27ae60", "#8e44ad"]
METRIC_KEYS = ("accuracy", "precision_negative", "recall_negative", "f1_negative")

fig_width = 6.4
fig_height = fig_width / 1.618

params = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "savefig.dpi": 150,
}

# PNG metadata would otherwise carry the matplotlib version string
_SAVE_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=_SAVE_META)
    plt.close(fig)
    return path


def _grouped_bars(ax, names, series: dict[str, list[float]]):
    n = len(series)
    width = 0.8 / max(n, 1)
    for i, (label, values) in enumerate(series.items()):
        xs = [x + (i - (n - 1) / 2) * width for x in range(len(names))]
        ax.bar(xs, values, width, label=label, color=COLORS[i % len(COLORS)])
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)


def plot_group_metrics(groups: dict[str, dict], path, title: str = "Held-out metrics per protocol group") -> Path:
    """One cluster of bars per group (pooled last), one bar per metric."""
    names = sorted(g for g in groups if g != "pooled") + (["pooled"] if "pooled" in groups else [])
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(fig_width, fig_height))
        _grouped_bars(ax, names, {k: [groups[g][k] for g in names] for k in METRIC_KEYS})
        ax.set_ylabel("score")
        ax.set_title(title)
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def plot_model_comparison(models: dict[str, dict], path) -> Path:
    """Pooled recall/F1 of the negative class for each trained model."""
    names = sorted(models)
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(fig_width, fig_height))
        series = {k: [models[m]["groups"]["pooled"][k] for m in names] for k in ("recall_negative", "f1_negative")}
        _grouped_bars(ax, names, series)
        ax.set_ylabel("score")
        ax.set_title("Pooled negative-class scores by model")
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def plot_golden_flow(stats: dict, path) -> Path:
    labels = ["detection rate"]
    values = [stats["detection_rate"]]
    if stats.get("false_positive_rate") is not None:
        labels.append("false-positive rate")
        values.append(stats["false_positive_rate"])
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(fig_width * 0.6, fig_height))
        ax.bar(labels, values, color=COLORS[: len(values)])
        for x, v in enumerate(values):
            ax.text(x, v + 0.02, f"{v:.3f}", ha="center")
        ax.set_ylim(0, 1.1)
        ax.set_title("Golden flow")
        return _save(fig, path)
