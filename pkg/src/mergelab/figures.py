"""Matplotlib renderings of the diagnostic reports, written next to the CSVs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .diagnostics import AccAtKReport, BiasReport


def save_acc_at_k_figure(
    report: AccAtKReport,
    tasks: Sequence[int],
    layers: Sequence[int],
    path: str | Path,
    k: int = 1,
) -> Path:
    """acc@k per layer, one line per task."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for task in tasks:
        ys = [report.acc(task, layer, k) for layer in layers]
        ax.plot(layers, ys, marker="o", label=f"task {task}")
    ax.set_xlabel("layer")
    ax.set_ylabel(f"acc@{k}")
    ax.set_xticks(list(layers))
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend()
    ax.set_title(f"Expert-identification acc@{k} by layer")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def save_bias_figure(report: BiasReport, path: str | Path) -> Path:
    """Grouped bars of per-task representation bias, one group per config."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    configs = list(report.per_config)
    tasks = sorted(next(iter(report.per_config.values())))
    width = 0.8 / len(configs)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for j, config in enumerate(configs):
        xs = [t + (j - (len(configs) - 1) / 2) * width for t in tasks]
        ys = [report.per_config[config][t] for t in tasks]
        color = "tab:green" if config == "se_merging" else "tab:gray"
        ax.bar(xs, ys, width=width, label=config, color=color)
    ax.set_xlabel("task")
    ax.set_ylabel("mean final-layer l1 bias")
    ax.set_xticks(tasks)
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    ax.set_title("Representation bias by merge configuration")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def save_accuracy_figure(accuracies: Mapping[str, float], path: str | Path) -> Path:
    """Bar chart of macro-average accuracy per method."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    names = list(accuracies)
    values = [accuracies[n] for n in names]
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    bars = ax.bar(range(len(names)), values, color="tab:blue")
    for bar, value in zip(bars, values):
        ax.text(
            bar.get_x() + bar.get_width() / 2, value + 0.01, f"{value:.3f}",
            ha="center", fontsize=8,
        )
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("mean accuracy")
    ax.set_ylim(0.0, 1.1)
    ax.grid(axis="y", alpha=0.3)
    ax.set_title("Macro-average accuracy by method")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out
