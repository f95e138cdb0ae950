"""Figure rendering for training logs, evaluation reports, and pack audits.

Every CLI report path writes its figures next to the delimited output files;
all rendering uses the Agg backend so it works headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_loss_curve(records: Sequence[dict[str, Any]], out_path: str | Path, window: int = 100) -> None:
    """Loss log with a window-mean overlay, stage boundaries marked."""
    steps = [r["step"] for r in records]
    losses = [r["loss"] for r in records]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(steps, losses, lw=0.5, alpha=0.4, label="loss")
    if len(losses) >= window:
        kernel = np.ones(window) / window
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[window - 1 :], smooth, lw=1.5, label=f"{window}-step mean")
    prev = None
    for r in records:
        if r["stage"] != prev:
            ax.axvline(r["step"], color="gray", ls=":", lw=0.8)
            ax.text(r["step"], ax.get_ylim()[1], r["stage"], fontsize=7, va="top")
            prev = r["stage"]
    ax.set_xlabel("step")
    ax.set_ylabel("velocity MSE")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_eval_report(per_sample: Sequence[dict[str, Any]], out_path: str | Path) -> None:
    """Per-sample sync bars plus the boundary-jump distribution."""
    sync = [r["sync"] for r in per_sample]
    jumps = [r["boundary_jump"] for r in per_sample if r.get("boundary_jump") is not None]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].bar(range(len(sync)), sync, color="tab:blue")
    axes[0].axhline(np.mean(sync), color="k", ls="--", lw=1, label=f"mean {np.mean(sync):.3f}")
    axes[0].set_xlabel("held-out sample")
    axes[0].set_ylabel("sync correlation")
    axes[0].set_ylim(-1, 1)
    axes[0].legend(fontsize=8)
    if jumps:
        axes[1].hist(jumps, bins=20, color="tab:orange")
        axes[1].set_xlabel("boundary jump (mean abs pixel diff)")
        axes[1].set_ylabel("count")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_pack_audit(rows: Sequence[dict[str, Any]], out_path: str | Path) -> None:
    """Token count per audited resolution against the budget line."""
    labels = [r["resolution"] for r in rows]
    raw = [r["raw_tokens"] for r in rows]
    fitted = [r["resulting_tokens"] for r in rows]
    budget = rows[0]["budget"] if rows else 0
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.bar(x - 0.2, raw, width=0.4, label="raw tokens")
    ax.bar(x + 0.2, fitted, width=0.4, label="after plan")
    ax.axhline(budget, color="r", ls="--", lw=1, label=f"budget M={budget}")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("tokens")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_boundary_diagnostics(rows: Sequence[dict[str, Any]], out_path: str | Path) -> None:
    """Per-boundary jump series for a generated long video."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = [r["boundary"] for r in rows]
    ax.plot(xs, [r["jump"] for r in rows], "o-", label="boundary jump")
    for r in rows:
        if r.get("direction_agree") is False:
            ax.plot(r["boundary"], r["jump"], "rx", ms=10)
    ax.set_xlabel("clip boundary")
    ax.set_ylabel("mean abs pixel diff")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_ablation(rows: Sequence[dict[str, Any]], out_path: str | Path) -> None:
    """Paired with/without-history jumps and direction agreement per seed."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    xs = np.arange(len(rows))
    axes[0].plot(xs, [r["jump_with"] for r in rows], "o-", label="with history")
    axes[0].plot(xs, [r["jump_without"] for r in rows], "s--", label="history cleared")
    axes[0].set_xlabel("seed")
    axes[0].set_ylabel("boundary jump")
    axes[0].legend(fontsize=8)
    axes[1].plot(xs, [r["agree_with"] for r in rows], "o-", label="with history")
    axes[1].plot(xs, [r["agree_without"] for r in rows], "s--", label="history cleared")
    axes[1].set_xlabel("seed")
    axes[1].set_ylabel("direction agreement")
    axes[1].set_ylim(-0.05, 1.05)
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
