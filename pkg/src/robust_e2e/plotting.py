"""PNG figures for the CLI report artifacts (headless matplotlib)."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PathLike = Union[str, Path]


def _finish(fig, path: PathLike, caption: Optional[str]) -> None:
    if caption:
        fig.text(0.01, 0.005, caption, fontsize=7, color="0.4", ha="left", va="bottom")
    fig.tight_layout(rect=(0, 0.03 if caption else 0, 1, 1))
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training(logs: dict, path: PathLike, caption: Optional[str] = None) -> None:
    """Per-phase clean and adversarial loss curves; ``logs`` maps phase name to a list of EpochLog."""
    fig, ax = plt.subplots(figsize=(6.4, 3.8))
    for name, log in logs.items():
        ep = [e.epoch for e in log]
        line, = ax.plot(ep, [e.clean_loss for e in log], marker="o", ms=3, label=f"{name} clean")
        adv = [e.adv_loss for e in log]
        if np.any(np.isfinite(adv)):
            ax.plot(ep, adv, ls="--", color=line.get_color(), label=f"{name} adversarial")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    _finish(fig, path, caption)


def plot_results(table, path: PathLike, caption: Optional[str] = None) -> None:
    """Grouped bars: one group per attack column, one bar per model."""
    cols = table.columns
    names = [n for n, _ in table.rows]
    width = 0.8 / max(1, len(names))
    x = np.arange(len(cols))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(cols)), 3.8))
    for i, (name, vals) in enumerate(table.rows):
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(cols, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mean task cost")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    _finish(fig, path, caption)


def plot_certification(rows: Sequence[dict], path: PathLike, caption: Optional[str] = None) -> None:
    """Per-sample clean / PGD-30 / exact / verify costs."""
    fig, ax = plt.subplots(figsize=(6.4, 3.8))
    idx = np.arange(len(rows))
    for key, style in (("clean", "o"), ("pgd30", "s"), ("exact", "^"), ("verify", "x")):
        ax.plot(idx, [r[key] for r in rows], style, label=key, ms=6 if key != "verify" else 8)
    ax.set_xlabel("sample")
    ax.set_ylabel("task cost")
    ax.legend(fontsize=8)
    _finish(fig, path, caption)


def plot_diagnostics(norm_x, norm_phi, cosine, path: PathLike, caption: Optional[str] = None) -> None:
    """Histograms of per-sample gradient norms and of the input/susceptance gradient cosine."""
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.4))
    bins = 20
    axes[0].hist(norm_x, bins=bins, alpha=0.7, label="input attack")
    axes[0].hist(norm_phi, bins=bins, alpha=0.7, label="susceptance attack")
    axes[0].set_xlabel("parameter-gradient 1-norm")
    axes[0].legend(fontsize=7)
    axes[1].hist(cosine, bins=np.linspace(-1, 1, 21), color="C2")
    axes[1].set_xlabel("cosine similarity")
    _finish(fig, path, caption)


def plot_chain(costs: Sequence[float], labels: Sequence[str], path: PathLike, caption: Optional[str] = None) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.bar(range(len(costs)), costs, color=["C0", "C1", "C1", "C3"][:len(costs)])
    ax.set_xticks(range(len(costs)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("task cost")
    _finish(fig, path, caption)
