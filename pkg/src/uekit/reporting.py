"""Figure and table rendering for evaluation reports, craft logs, and update traces.

All figures are written as PNG files via the Agg backend; tables render as
aligned text next to their CSV counterparts.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .crafting import CraftLog
from .generator import PerturbationBank
from .models import UpdateTrace, normalize_trace


def save_craft_log_png(log: CraftLog, path: str | Path) -> None:
    """Dual-curve plot: surrogate accuracy on perturbed-train vs clean-train inputs,
    with stage boundaries marked."""
    epochs = [r.epoch for r in log.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.acc_perturbed_train for r in log.rows], label="perturbed train", color="tab:red")
    ax.plot(epochs, [r.acc_clean_train for r in log.rows], label="clean train", color="tab:blue")
    seen = set()
    for r in log.rows:
        if r.stage not in seen and r.stage > 1:
            ax.axvline(r.epoch - 0.5, color="gray", linestyle=":", linewidth=0.8)
        seen.add(r.stage)
    ax.set_xlabel("epoch")
    ax.set_ylabel("surrogate accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trace_png(trace: UpdateTrace, path: str | Path) -> None:
    """Normalized cumulative parameter-update curves, one per group, all in [0, 1]."""
    norm = trace if trace.normalized is not None else normalize_trace(trace)
    epochs = np.arange(1, norm.epochs + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    for g, name in enumerate(norm.group_names):
        ax.plot(epochs, norm.normalized[:, g], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("normalized cumulative update")
    ax.set_ylim(-0.02, 1.05)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_curves_png(train_curves, test_curves, path: str | Path, title: str = "") -> None:
    """Victim learning curves (train on given data vs clean test), one line per repeat."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, curve in enumerate(train_curves):
        ax.plot(range(1, len(curve) + 1), curve, color="tab:red", alpha=0.6,
                label="train" if i == 0 else None)
    for i, curve in enumerate(test_curves):
        ax.plot(range(1, len(curve) + 1), curve, color="tab:blue", alpha=0.6,
                label="clean test" if i == 0 else None)
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bank_grid_png(bank: PerturbationBank, path: str | Path, magnify: float = 16.0) -> None:
    """Grid of bank entries, magnified and centered at gray for visual inspection."""
    k = bank.class_count
    cols = min(k, 5)
    rows = (k + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2 * rows))
    axes = np.atleast_1d(axes).ravel()
    for i in range(len(axes)):
        axes[i].axis("off")
        if i >= k:
            continue
        img = bank.deltas[i].numpy()
        vis = np.clip(0.5 + magnify * np.transpose(img, (1, 2, 0)), 0, 1)
        if vis.shape[-1] == 1:
            vis = vis[:, :, 0]
        axes[i].imshow(vis)
        axes[i].set_title(f"class {i}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ratio_sweep_png(ratios, accuracies, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ratios, accuracies, marker="o")
    ax.set_xlabel("poison ratio")
    ax.set_ylabel("clean test accuracy")
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_png(labels, accuracies, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(labels)), 4))
    ax.bar(range(len(labels)), accuracies, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("clean test accuracy")
    ax.set_ylim(0, 1.02)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    """Aligned-column text table."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines) + "\n"
