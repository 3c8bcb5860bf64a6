"""Matplotlib figures written next to the text/JSON outputs (Agg backend, PNG)."""

from __future__ import annotations

import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..icc import IccTrace  # noqa: E402
from ..metrics import GROUPS  # noqa: E402
from ..rrl import TERMS, Stage1Trace  # noqa: E402


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_stage1_trace(trace: Stage1Trace, path: str) -> str:
    """Per-epoch loss terms (log scale) and validation BACC."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 3.6))
    epochs = np.arange(1, len(trace) + 1)
    for name in TERMS:
        vals = np.asarray(getattr(trace, name))
        if np.any(vals > 0):
            ax_loss.plot(epochs, np.where(vals > 0, vals, np.nan), label=name)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    ax_acc.plot(epochs, trace.val_bacc, color="k")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation BACC")
    return _save(fig, path)


def plot_icc_traces(traces: Sequence[IccTrace], path: str, labels: Sequence[str] = ()) -> str:
    """Validation BACC and cumulative wall-clock per EM iteration."""
    fig, (ax_acc, ax_time) = plt.subplots(1, 2, figsize=(10, 3.6))
    for i, tr in enumerate(traces):
        label = labels[i] if i < len(labels) else f"run {i + 1}"
        js = np.arange(1, len(tr) + 1)
        ax_acc.plot(js, tr.val_bacc, marker="o", label=label)
        ax_time.plot(js, tr.wall_clock, marker="o", label=label)
    ax_acc.set_xlabel("iteration J")
    ax_acc.set_ylabel("validation BACC")
    ax_time.set_xlabel("iteration J")
    ax_time.set_ylabel("wall-clock (s)")
    ax_acc.legend(fontsize=8)
    return _save(fig, path)


def plot_group_bacc(rows: Dict[str, dict], path: str) -> str:
    """Grouped bars of mean head/medium/tail/overall BACC with std error bars."""
    cols: List[str] = [*GROUPS, "bacc"]
    variants = list(rows)
    width = 0.8 / len(cols)
    x = np.arange(len(variants))
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(variants)), 3.8))
    for i, c in enumerate(cols):
        means = [rows[v][c]["mean"] for v in variants]
        stds = [rows[v][c]["std"] for v in variants]
        ax.bar(x + (i - (len(cols) - 1) / 2) * width, means, width, yerr=stds,
               label="overall" if c == "bacc" else c, capsize=2)
    ax.set_xticks(x)
    ax.set_xticklabels(variants, rotation=30, ha="right")
    ax.set_ylabel("BACC")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8, ncol=4)
    return _save(fig, path)


__all__ = ["plot_group_bacc", "plot_icc_traces", "plot_stage1_trace"]
