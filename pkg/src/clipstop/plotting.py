"""Matplotlib renderings of the evaluation and training CSV outputs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CLASS_COLORS = {0: "tab:blue", 1: "tab:green"}
CLASS_NAMES = {0: "control", 1: "disease"}
VIEW_MARKERS = {"A4C": "o", "PLAX": "s", "PSAX": "^"}


def pretty_axes(ax) -> None:
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(direction="out", length=3)


def render_fig2(rows: Sequence[dict], path: str | Path, max_clips: int = 15) -> None:
    """Mean running prediction with a one-std band, agent (left) versus random order (right)."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2), sharey=True)
    for ax, policy, title in zip(axes, ("rl", "random"), ("agent", "random sampling")):
        for label in (0, 1):
            sel = [r for r in rows if r["policy"] == policy and int(r["label"]) == label and int(r["n_clips"]) <= max_clips]
            if not sel:
                continue
            n = np.array([int(r["n_clips"]) for r in sel])
            m = np.array([float(r["mean"]) for r in sel])
            s = np.array([float(r["std"]) for r in sel])
            c = CLASS_COLORS[label]
            ax.plot(n, m, color=c, label=CLASS_NAMES[label])
            ax.fill_between(n, m - s, m + s, color=c, alpha=0.2, linewidth=0)
        ax.set_title(title)
        ax.set_xlabel("clips processed")
        ax.set_ylim(0, 1)
        pretty_axes(ax)
    axes[0].set_ylabel("mean prediction")
    axes[0].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_fig3(rows: Sequence[dict], path: str | Path, n_per_group: int = 15) -> None:
    """Per-study selection map: one row per study, marker = view, colour = clip score.

    Correctly classified studies sit in the top block, misclassified below; the bar on
    the left is the fraction of the study's clips that were processed.
    """
    studies = defaultdict(list)
    for r in rows:
        studies[r["study_id"]].append(r)
    correct = [sid for sid, rs in studies.items() if int(rs[0]["correct"])][:n_per_group]
    wrong = [sid for sid, rs in studies.items() if not int(rs[0]["correct"])][:n_per_group]
    order = correct + wrong
    if not order:
        return
    fig, (bar_ax, ax) = plt.subplots(
        1, 2, figsize=(8, 0.22 * len(order) + 1.2), sharey=True, gridspec_kw={"width_ratios": [1, 5]}
    )
    y_of = {sid: len(order) - 1 - i for i, sid in enumerate(order)}
    cmap = plt.get_cmap("coolwarm")
    for sid in order:
        rs = sorted(studies[sid], key=lambda r: int(r["step"]))
        y = y_of[sid]
        bar_ax.barh(y, float(rs[0]["fraction_used"]), color="0.5", height=0.6)
        for r in rs:
            ax.scatter(
                int(r["step"]), y, marker=VIEW_MARKERS[r["view"]], c=[cmap(float(r["clip_score"]))],
                edgecolors="k", linewidths=0.4, s=28,
            )
    n_c = len(correct)
    ax.axhspan(len(order) - n_c - 0.5, len(order) - 0.5, color="tab:green", alpha=0.08)
    if wrong:
        ax.axhspan(-0.5, len(wrong) - 0.5, color="tab:red", alpha=0.08)
    bar_ax.invert_xaxis()
    bar_ax.set_xlabel("fraction used")
    bar_ax.set_yticks([y_of[s] for s in order])
    bar_ax.set_yticklabels(order, fontsize=6)
    ax.set_xlabel("processing step")
    for name, mk in VIEW_MARKERS.items():
        ax.scatter([], [], marker=mk, facecolors="none", edgecolors="k", label=name)
    ax.legend(frameon=False, fontsize=7, loc="lower right")
    pretty_axes(ax)
    pretty_axes(bar_ax)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_training_log(rows: Sequence[dict], path: str | Path) -> None:
    keys = ("mean_episode_reward", "mean_episode_length", "entropy", "classification_loss")
    fig, axes = plt.subplots(1, len(keys), figsize=(3 * len(keys), 2.6))
    ts = [float(r["timesteps"]) for r in rows]
    for ax, k in zip(axes, keys):
        ax.plot(ts, [float(r[k]) for r in rows], lw=1)
        ax.set_title(k.replace("_", " "), fontsize=9)
        ax.set_xlabel("timesteps", fontsize=8)
        pretty_axes(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
