"""Figure rendering for training runs and mode comparisons.

Figures are written next to the delimited metrics so a run directory is
self-describing. Everything draws through the Agg backend; no display is
ever required.
"""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_SIZE = (7.0, 4.2)
DPI = 110


def _save(fig, out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_run_figures(records: Sequence, out_dir: str) -> list[str]:
    """Loss, entropy, recall, and fairness curves for one training run."""
    os.makedirs(out_dir, exist_ok=True)
    rounds = [r.round_index for r in records]
    paths = []

    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.plot(rounds, [r.mean_loss for r in records], label="mean client loss",
            color="tab:blue")
    routed = [(r.round_index, r.router_loss) for r in records
              if r.router_loss is not None]
    if routed:
        ax.plot(*zip(*routed), label="router loss", color="tab:orange")
    ax.set_xlabel("round")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    paths.append(_save(fig, out_dir, "loss_curve.png"))

    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.plot(rounds, [r.weight_entropy for r in records],
            label="aggregation weight entropy", color="tab:green")
    ax.plot(rounds, [r.q_entropy for r in records],
            label="fairness distribution entropy", color="tab:red")
    ax.set_xlabel("round")
    ax.set_ylabel("entropy (nats)")
    ax.legend()
    ax.grid(alpha=0.3)
    paths.append(_save(fig, out_dir, "entropy_curve.png"))

    evaluated = [r for r in records if r.metrics is not None]
    if evaluated:
        ticks = [r.round_index for r in evaluated]
        fig, ax = plt.subplots(figsize=FIG_SIZE)
        for k in sorted(evaluated[0].metrics.i2t):
            ax.plot(ticks, [r.metrics.i2t[k] for r in evaluated],
                    label=f"image to text R@{k}")
            ax.plot(ticks, [r.metrics.t2i[k] for r in evaluated],
                    linestyle="--", label=f"text to image R@{k}")
        ax.set_xlabel("round")
        ax.set_ylabel("recall (%)")
        ax.set_ylim(0.0, 100.0)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        paths.append(_save(fig, out_dir, "recall_curve.png"))

        fig, ax = plt.subplots(figsize=FIG_SIZE)
        ax.plot(ticks, [r.metrics.fairness_std for r in evaluated],
                label="per-client R@1 std", color="tab:purple")
        ax.plot(ticks, [r.metrics.worst_r1 for r in evaluated],
                label="worst client R@1", color="tab:brown")
        ax.set_xlabel("round")
        ax.legend()
        ax.grid(alpha=0.3)
        paths.append(_save(fig, out_dir, "fairness_curve.png"))

        last = evaluated[-1].metrics
        if last.per_client_r1:
            fig, ax = plt.subplots(figsize=FIG_SIZE)
            ids = sorted(last.per_client_r1)
            ax.bar([str(i) for i in ids],
                   [last.per_client_r1[i] for i in ids], color="tab:blue")
            ax.set_xlabel("client")
            ax.set_ylabel("R@1 on held-out pairs (%)")
            ax.set_ylim(0.0, 100.0)
            ax.grid(alpha=0.3, axis="y")
            paths.append(_save(fig, out_dir, "per_client_recall.png"))

    return paths


def render_compare_figure(rows: Sequence[dict], out_dir: str) -> str:
    """Grouped bars of mean recall with a std whisker per mode."""
    os.makedirs(out_dir, exist_ok=True)
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    modes = [row["mode"] for row in rows]
    means = np.array([row["r1_mean"] for row in rows])
    stds = np.array([row["r1_std"] for row in rows])
    worst = np.array([row["worst_r1"] for row in rows])
    x = np.arange(len(modes))
    ax.bar(x - 0.2, means, width=0.4, yerr=stds, capsize=4,
           label="mean R@1", color="tab:blue")
    ax.bar(x + 0.2, worst, width=0.4, label="worst client R@1",
           color="tab:orange")
    ax.set_xticks(x)
    ax.set_xticklabels(modes)
    ax.set_ylabel("recall at 1 (%)")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, out_dir, "compare.png")
