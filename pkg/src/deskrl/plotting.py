"""Figure rendering for report artifacts.

Each function renders one figure to a file from the same data that backs
a CSV artifact; the CSVs remain the canonical, machine-readable output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_attention_map",
    "save_training_curves",
    "save_eval_returns",
    "save_zero_out",
    "save_ood_sweep",
    "save_filters",
    "save_ablation",
    "save_return_histogram",
]

_DPI = 150


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_attention_map(matrix: np.ndarray, labels: list[str], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    im = ax.imshow(np.abs(matrix), cmap="viridis", aspect="equal")
    step = max(1, len(labels) // 20)
    ticks = np.arange(0, len(labels), step)
    ax.set_xticks(ticks)
    ax.set_xticklabels([labels[i] for i in ticks], rotation=90, fontsize=6)
    ax.set_yticks(ticks)
    ax.set_yticklabels([labels[i] for i in ticks], fontsize=6)
    ax.set_xlabel("attended position")
    ax.set_ylabel("query position")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _finish(fig, path)


def save_training_curves(metrics: list[dict], path) -> Path:
    train_rows = [r for r in metrics if r.get("loss") is not None]
    eval_rows = [r for r in metrics if r.get("eval_return_mean") is not None]
    n_axes = 2 + (1 if eval_rows else 0)
    fig, axes = plt.subplots(1, n_axes, figsize=(4.0 * n_axes, 3.2))
    updates = [r["update"] for r in train_rows]
    axes[0].plot(updates, [r["loss"] for r in train_rows], lw=0.8)
    axes[0].set_yscale("log")
    axes[0].set_xlabel("update")
    axes[0].set_ylabel("loss")
    axes[1].plot(updates, [r["lr"] for r in train_rows], lw=0.8, color="tab:orange")
    axes[1].set_xlabel("update")
    axes[1].set_ylabel("learning rate")
    if eval_rows:
        axes[2].errorbar(
            [r["update"] for r in eval_rows],
            [r["eval_return_mean"] for r in eval_rows],
            yerr=[r["eval_return_std"] for r in eval_rows],
            marker="o",
            ms=3,
            lw=1,
        )
        axes[2].set_xlabel("update")
        axes[2].set_ylabel("eval return")
    return _finish(fig, path)


def save_eval_returns(results, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    targets = [r.target for r in results]
    ax.errorbar(targets, [r.mean for r in results], yerr=[r.std for r in results], marker="o")
    ax.set_xlabel("target return")
    ax.set_ylabel("achieved return")
    return _finish(fig, path)


def save_zero_out(results, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    modals = [r.modal for r in results]
    x = np.arange(len(modals))
    ax.bar(x - 0.2, [r.intact_mean for r in results], width=0.4, label="intact")
    ax.bar(x + 0.2, [r.zeroed_mean for r in results], width=0.4, label="zeroed")
    ax.set_xticks(x)
    ax.set_xticklabels(modals)
    ax.set_ylabel("return")
    ax.legend()
    return _finish(fig, path)


def save_ood_sweep(points, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    ax.errorbar(
        [p.multiplier for p in points],
        [p.return_mean for p in points],
        yerr=[p.return_std for p in points],
        marker="o",
    )
    ax.set_xlabel("target return multiple of dataset max")
    ax.set_ylabel("achieved return")
    return _finish(fig, path)


def save_filters(banks, path) -> Path:
    """One panel per (block, bank): filter coefficients over lag, one line per dim."""
    n = len(banks)
    cols = min(3, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.4 * cols, 2.6 * rows), squeeze=False)
    for i, (block, bank, coeffs) in enumerate(banks):
        ax = axes[i // cols][i % cols]
        for q in range(coeffs.shape[0]):
            ax.plot(coeffs[q], lw=0.5, alpha=0.6)
        ax.set_title(f"block {block} / {bank}", fontsize=8)
        ax.set_xlabel("lag")
    for j in range(n, rows * cols):
        axes[j // cols][j % cols].axis("off")
    return _finish(fig, path)


def save_ablation(runs, path) -> Path:
    """Heatmap of cell means for two numeric axes, grouped bars otherwise."""
    cells: dict[tuple, list[float]] = {}
    axes_names: list[str] = []
    for run in runs:
        for k in run.cell:
            if k not in axes_names:
                axes_names.append(k)
        key = tuple(run.cell[k] for k in run.cell)
        cells.setdefault(key, []).append(run.return_mean)
    means = {k: float(np.mean(v)) for k, v in cells.items()}
    numeric_axes = [
        a
        for i, a in enumerate(axes_names)
        if all(isinstance(k[i], (int, float)) and not isinstance(k[i], bool) for k in means)
    ]
    if len(axes_names) == 2 and len(numeric_axes) == 2:
        xs = sorted({k[0] for k in means})
        ys = sorted({k[1] for k in means})
        grid = np.full((len(xs), len(ys)), np.nan)
        for (a, b), v in means.items():
            grid[xs.index(a), ys.index(b)] = v
        fig, ax = plt.subplots(figsize=(4.8, 3.8))
        im = ax.imshow(grid, cmap="viridis")
        ax.set_xticks(range(len(ys)))
        ax.set_xticklabels(ys)
        ax.set_yticks(range(len(xs)))
        ax.set_yticklabels(xs)
        ax.set_xlabel(axes_names[1])
        ax.set_ylabel(axes_names[0])
        for i in range(len(xs)):
            for j in range(len(ys)):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.3g}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.046)
    else:
        labels = [", ".join(f"{k}={v}" for k, v in zip(axes_names, key)) for key in means]
        fig, ax = plt.subplots(figsize=(max(4.8, 0.8 * len(means)), 3.4))
        ax.bar(range(len(means)), list(means.values()))
        ax.set_xticks(range(len(means)))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel("return")
    return _finish(fig, path)


def save_return_histogram(returns_by_label: dict[str, np.ndarray], path) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    for label, values in returns_by_label.items():
        ax.hist(values, bins=24, alpha=0.6, label=label or "all")
    ax.set_xlabel("episode return")
    ax.set_ylabel("episodes")
    ax.legend()
    return _finish(fig, path)
