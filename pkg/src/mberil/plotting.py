"""SVG figures for learning curves and the expert-size sweep."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> None:
    # fixed hash salt and no date keep reruns byte-identical
    with plt.rc_context({"svg.hashsalt": "mberil", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_learning_curves(summary: list[dict], path: str | Path) -> None:
    """Mean normalized return with a +-1 sd band against real interactions (log x)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant in dict.fromkeys(r["variant"] for r in summary):
        rows = [r for r in summary if r["variant"] == variant]
        x = np.array([r["real_interactions"] for r in rows], float)
        mean = np.array([r["mean"] for r in rows])
        (line,) = ax.plot(x, mean, label=variant)
        ax.fill_between(x, [r["lower"] for r in rows], [r["upper"] for r in rows],
                        color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xscale("log")
    ax.set_xlabel("real-environment interactions")
    ax.set_ylabel("normalized return")
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, Path(path))


def plot_expert_sweep(rows: list[dict], path: str | Path) -> None:
    """Mean final normalized return against the number of expert trajectories."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant in dict.fromkeys(r["variant"] for r in rows):
        sizes = sorted({r["expert_trajectories"] for r in rows if r["variant"] == variant})
        vals = [[r["final_normalized_return"] for r in rows
                 if r["variant"] == variant and r["expert_trajectories"] == n] for n in sizes]
        ax.errorbar(sizes, [np.mean(v) for v in vals], yerr=[np.std(v) for v in vals],
                    marker="o", capsize=3, label=variant)
    ax.set_xlabel("expert trajectories")
    ax.set_ylabel("final normalized return")
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, Path(path))
