"""Figure rendering for the report paths.

Every evaluation/probing/repro command writes PNG figures next to its CSV
outputs; the CSVs stay the canonical data, the figures are for eyeballing.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_regret_figure",
    "save_suboptimality_figure",
    "save_training_curve",
    "save_probe_figure",
    "save_histogram",
    "save_lines",
]


def _finish(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_regret_figure(report, path: Path, title: str = "Cumulative regret") -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    t = np.arange(1, report.mean_regret.shape[1] + 1)
    for i, name in enumerate(report.policies):
        label = f"{name} ({report.final_regret[name]:.2f})"
        ax.plot(t, report.mean_regret[i], linewidth=1.6, label=label)
        ax.fill_between(t, report.q05_regret[i], report.q95_regret[i], alpha=0.18)
    ax.set_xlabel("t")
    ax.set_ylabel("mean cumulative regret")
    ax.set_title(f"{title} ({report.run_count} runs, 90% bands)")
    ax.grid(alpha=0.25)
    ax.legend(fontsize=8)
    _finish(fig, path)


def save_suboptimality_figure(report, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    t = np.arange(1, report.mean_subopt.shape[1] + 1)
    for i, name in enumerate(report.policies):
        ax.plot(t, report.mean_subopt[i], linewidth=1.4, label=name)
    ax.set_xlabel("t")
    ax.set_ylabel("mean action suboptimality")
    ax.grid(alpha=0.25)
    ax.legend(fontsize=8)
    _finish(fig, path)


def save_training_curve(trace: Sequence[dict], path: Path) -> None:
    if not trace:
        return
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    iters = [row["iteration"] for row in trace]
    ax.plot(iters, [row["train_loss"] for row in trace],
            color="tab:blue", linewidth=1.3, label="train loss")
    holdout = [(r["iteration"], r["holdout_loss"]) for r in trace if "holdout_loss" in r]
    if holdout:
        hx, hy = zip(*holdout)
        ax.plot(hx, hy, color="tab:orange", linewidth=1.5, marker="o",
                markersize=3, label="holdout loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.25)
    ax.legend(fontsize=8)
    _finish(fig, path)


def save_probe_figure(rows: Sequence[dict], path: Path) -> None:
    """rows carry (layer, target, error_normalized)."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    by_target: Dict[str, List[tuple]] = {}
    for row in rows:
        by_target.setdefault(row["target"], []).append((row["layer"], row["error_normalized"]))
    for target, pairs in by_target.items():
        pairs.sort()
        ax.plot([p[0] for p in pairs], [p[1] for p in pairs], marker="o",
                markersize=3.5, linewidth=1.4, label=target)
    ax.set_xlabel("layer")
    ax.set_ylabel("normalized probe error")
    ax.grid(alpha=0.25)
    ax.legend(fontsize=8)
    _finish(fig, path)


def save_histogram(values: np.ndarray, path: Path, xlabel: str, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    ax.hist(np.asarray(values).reshape(-1), bins=41, alpha=0.85)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.25)
    _finish(fig, path)


def save_lines(x: np.ndarray, curves: Dict[str, np.ndarray], path: Path,
               xlabel: str, ylabel: str, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, y in curves.items():
        ax.plot(x, y, linewidth=1.5, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.25)
    ax.legend(fontsize=8)
    _finish(fig, path)
