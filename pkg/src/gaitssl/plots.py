"""Figure rendering for the CLI report path (PNG next to each CSV)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .biomarker import BiomarkerSeries, SimilarityMatrix
from .probe import ProbeResult


def plot_similarity(sim: SimilarityMatrix, path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    panels = [
        (sim.matrix, "embedding cosine similarity", dict(vmin=-1, vmax=1, cmap="viridis")),
        (sim.same_subject, "same subject", dict(vmin=0, vmax=1, cmap="cividis")),
        (sim.same_diagnosis, "same diagnosis", dict(vmin=0, vmax=1, cmap="cividis")),
    ]
    for ax, (matrix, title, kwargs) in zip(axes, panels):
        im = ax.imshow(matrix, interpolation="nearest", **kwargs)
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.8)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_biomarker(series: list[BiomarkerSeries], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for s in series:
        days = [p[0] for p in s.points]
        values = [p[1] for p in s.points]
        ax.plot(days, values, marker="o", label=s.subject_id)
    ax.set_xlabel("session day")
    ax.set_ylabel("median cosine similarity to control reference")
    ax.set_ylim(-1.05, 1.05)
    if len(series) <= 12:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_probe(results: list[ProbeResult], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    positions = []
    for i, res in enumerate(results):
        xs = [i + 0.15 * (f.fold - (len(res.folds) - 1) / 2) for f in res.folds]
        ax.bar(xs, [f.accuracy for f in res.folds], width=0.12, color="tab:blue", alpha=0.7)
        ax.plot([i - 0.3, i + 0.3], [res.mean, res.mean], color="tab:red", lw=2)
        positions.append(i)
    ax.set_xticks(positions)
    ax.set_xticklabels([r.task for r in results], rotation=15)
    ax.set_ylabel("per-fold accuracy (red = mean)")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_training(metrics: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [m["epoch"] for m in metrics]
    for key in ("contrastive_loss", "prediction_loss", "total_loss"):
        ax.plot(epochs, [m[key] for m in metrics], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_cohort_channels(frames: np.ndarray, channel_names, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    t = np.arange(frames.shape[0]) / 30.0
    for j, name in enumerate(channel_names):
        ax.plot(t, frames[:, j], label=name, lw=0.9)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("angle (deg)")
    ax.legend(fontsize="x-small", ncol=3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
