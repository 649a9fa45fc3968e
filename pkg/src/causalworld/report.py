"""Figure rendering for run artifacts: every report lands next to its CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .chains import CausalChain, format_value


def plot_learning_curve(metrics_path: str | Path, out_path: str | Path,
                        threshold: float | None = None) -> Path:
    epochs, steps, means, stds = [], [], [], []
    with open(metrics_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            epochs.append(int(row["epoch"]))
            steps.append(int(row["env_steps"]))
            means.append(float(row["eval_return_mean"]))
            stds.append(float(row["eval_return_std"]))
    means_a, stds_a = np.array(means), np.array(stds)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, means_a, color="tab:red", label="eval return")
    ax.fill_between(steps, means_a - stds_a, means_a + stds_a, color="tab:red", alpha=0.2)
    if threshold is not None:
        ax.axhline(threshold, color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episode return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def plot_benchmark_summary(summary_csv: str | Path, out_path: str | Path) -> Path:
    modes, medians = [], []
    with open(summary_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            modes.append(row["mode"])
            medians.append(float(row["median_accuracy"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(modes, medians, color=["tab:blue", "tab:orange", "tab:green"][: len(modes)])
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("median recovery accuracy")
    for i, v in enumerate(medians):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def plot_threshold_sweep(sweep_csv: str | Path, out_path: str | Path) -> Path:
    etas, edges, lls = [], [], []
    with open(sweep_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            etas.append(float(row["eta"]))
            edges.append(int(row["edges"]))
            lls.append(float(row["holdout_ll"]))
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(etas, edges, "o-", color="tab:blue", label="edges")
    ax1.set_xlabel("edge threshold")
    ax1.set_ylabel("graph edges", color="tab:blue")
    ax1.set_xscale("symlog", linthresh=1e-3)
    if not all(np.isnan(lls)):
        ax2 = ax1.twinx()
        ax2.plot(etas, lls, "s--", color="tab:red", label="held-out log-likelihood")
        ax2.set_ylabel("held-out log-likelihood", color="tab:red")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def plot_chain(chain: CausalChain, out_path: str | Path) -> Path:
    """Step-by-variable grid, time left to right, edge width by weight."""
    var_order: list[str] = []
    for name in chain.schema.names("state"):
        var_order.append(name)
    for name in chain.schema.names("outcome"):
        var_order.append(name)
    for name in chain.schema.reward_names():
        var_order.append(name)
    rows = {name: i for i, name in enumerate(var_order)}

    fig, ax = plt.subplots(figsize=(1.8 * (chain.horizon + 2), 0.7 * (len(var_order) + 1)))
    pos = {}
    for (name, step), info in chain.nodes.items():
        x = step - chain.start_step + (0.45 if info.kind == "reward" else 0.0)
        y = len(var_order) - rows[name]
        pos[(name, step)] = (x, y)
        color = {"state": "#cfe8ff", "outcome": "#ffe9b8", "reward": "#d9f2d9"}[info.kind]
        ax.scatter([x], [y], s=900, c=color, edgecolors="k", zorder=3)
        ax.annotate(f"{name}\n{format_value(info.value)}", (x, y),
                    ha="center", va="center", fontsize=7, zorder=4)
    for (a, b), w in chain.edges.items():
        if a not in pos or b not in pos:
            continue
        (x1, y1), (x2, y2) = pos[a], pos[b]
        ax.annotate("", xy=(x2, y2), xytext=(x1, y1),
                    arrowprops=dict(arrowstyle="-|>", lw=0.5 + 2.5 * (w or 1.0),
                                    color="gray", shrinkA=18, shrinkB=18))
    ax.set_xlim(-0.7, chain.horizon + 1.2)
    ax.set_ylim(0, len(var_order) + 1)
    ax.set_xticks(range(chain.horizon + 1))
    ax.set_xticklabels([f"t+{k}" if k else "t" for k in range(chain.horizon + 1)])
    ax.set_yticks([])
    for side in ("left", "right", "top"):
        ax.spines[side].set_visible(False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)
