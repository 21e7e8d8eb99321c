"""Render the CSV artifacts of a run directory to PNG figures.

Walks a directory tree, finds the delimited outputs the experiment
drivers write, and saves one figure next to each file (same stem, .png).
Headless: forces the Agg backend before pyplot is touched.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np

from .experiments import read_csv


def _col(header, rows, name, kind=float):
    i = header.index(name)
    return [kind(r[i]) for r in rows]


def plot_metrics(csv_path) -> Path:
    """Accuracy vs round; one faint line per repeat plus the mean curve."""
    header, rows = read_csv(csv_path)
    reps = _col(header, rows, "repeat", int)
    rounds = _col(header, rows, "round", int)
    accs = _col(header, rows, "accuracy")
    shadows = _col(header, rows, "shadow_accuracy")
    strategy = rows[0][header.index("strategy")] if rows else "?"

    by_rep: dict = defaultdict(list)
    for rep, rnd, acc in zip(reps, rounds, accs):
        by_rep[rep].append((rnd, acc))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for rep, series in sorted(by_rep.items()):
        series.sort()
        ax.plot([r for r, _ in series], [a for _, a in series],
                color="tab:blue", alpha=0.25, linewidth=1)
    n_rounds = max(rounds) if rounds else 0
    mean_acc = np.zeros(n_rounds)
    mean_shadow = np.zeros(n_rounds)
    counts = np.zeros(n_rounds)
    for rnd, acc, sh in zip(rounds, accs, shadows):
        mean_acc[rnd - 1] += acc
        mean_shadow[rnd - 1] += sh
        counts[rnd - 1] += 1
    counts[counts == 0] = 1
    xs = np.arange(1, n_rounds + 1)
    ax.plot(xs, mean_acc / counts, color="tab:blue", linewidth=2,
            label="accuracy (mean)")
    ax.plot(xs, mean_shadow / counts, color="tab:orange", linewidth=1.5,
            linestyle="--", label="uniform-average shadow")
    ax.set_xlabel("round")
    ax.set_ylabel("validation accuracy")
    ax.set_title(f"strategy: {strategy}")
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    out = Path(csv_path).with_suffix(".png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_reward_curve(csv_path) -> Path:
    """Episode return per variant, with a short moving average."""
    header, rows = read_csv(csv_path)
    episodes = _col(header, rows, "episode", int)
    returns = _col(header, rows, "return")
    variants = [r[header.index("variant")] for r in rows]

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for variant in dict.fromkeys(variants):  # keep first-seen order
        xs = [e for e, v in zip(episodes, variants) if v == variant]
        ys = [g for g, v in zip(returns, variants) if v == variant]
        (line,) = ax.plot(xs, ys, alpha=0.35, linewidth=1)
        window = max(min(len(ys) // 5, 10), 1)
        if len(ys) >= window:
            smooth = np.convolve(ys, np.ones(window) / window, mode="valid")
            ax.plot(xs[window - 1:], smooth, color=line.get_color(),
                    linewidth=2, label=variant)
        else:
            line.set_label(variant)
    ax.set_xlabel("episode")
    ax.set_ylabel("discounted return")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    out = Path(csv_path).with_suffix(".png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_train_rounds(csv_path) -> Path:
    """Per-episode mean accuracy and mean reward over the training run."""
    header, rows = read_csv(csv_path)
    episodes = _col(header, rows, "episode", int)
    accs = _col(header, rows, "accuracy")
    rewards = _col(header, rows, "reward")

    acc_by_ep: dict = defaultdict(list)
    rew_by_ep: dict = defaultdict(list)
    for ep, acc, rew in zip(episodes, accs, rewards):
        acc_by_ep[ep].append(acc)
        rew_by_ep[ep].append(rew)
    xs = sorted(acc_by_ep)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(xs, [np.mean(acc_by_ep[e]) for e in xs], color="tab:blue",
            label="mean accuracy")
    ax.set_xlabel("episode")
    ax.set_ylabel("validation accuracy", color="tab:blue")
    ax.set_ylim(0.0, 1.0)
    ax2 = ax.twinx()
    ax2.plot(xs, [np.mean(rew_by_ep[e]) for e in xs], color="tab:red",
             label="mean round reward")
    ax2.set_ylabel("compound reward", color="tab:red")
    ax.grid(alpha=0.3)
    out = Path(csv_path).with_suffix(".png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_sweep_summary(csv_path) -> Path:
    """Final accuracy against the swept value, one line per strategy."""
    header, rows = read_csv(csv_path)
    values = _col(header, rows, "value")
    accs = _col(header, rows, "acc_avg")
    strategies = [r[header.index("strategy")] for r in rows]
    axis = rows[0][header.index("axis")] if rows else "value"

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for strat in dict.fromkeys(strategies):
        pts = sorted((v, a) for v, a, s in zip(values, accs, strategies)
                     if s == strat)
        ax.plot([v for v, _ in pts], [a for _, a in pts], marker="o",
                label=strat)
    ax.set_xlabel(axis)
    ax.set_ylabel("Acc_avg")
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    out = Path(csv_path).with_suffix(".png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


PLOTTERS = {
    "metrics.csv": plot_metrics,
    "reward_curve.csv": plot_reward_curve,
    "ablation_curves.csv": plot_reward_curve,
    "train_rounds.csv": plot_train_rounds,
    "sweep_summary.csv": plot_sweep_summary,
}


def render_report(directory) -> list:
    """Render figures for every known CSV under `directory` (recursive).

    Returns the list of PNG paths written, sorted for stable output.
    """
    root = Path(directory)
    if not root.is_dir():
        raise NotADirectoryError(f"no such run directory: {directory}")
    written = []
    for csv_path in sorted(root.rglob("*.csv")):
        plotter = PLOTTERS.get(csv_path.name)
        if plotter is None:
            continue
        written.append(plotter(csv_path))
    return sorted(written)
