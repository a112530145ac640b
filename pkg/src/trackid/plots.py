"""Figures written next to the CSV reports."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = {"dpi": 120, "bbox_inches": "tight", "metadata": {"Software": None}}


def plot_trace(records, truth: int, path, title: str = ""):
    """Predicted label per frame (dots) with its confidence (curve) and the
    ground-truth label as a horizontal line; dotted lines mark windows."""
    frames = [r.frame for r in records]
    fig, ax = plt.subplots(figsize=(9, 3.2))
    ax.scatter(frames, [r.predicted for r in records], s=10, color="tab:blue", label="prediction")
    ax.axhline(truth, color="tab:blue", lw=0.8)
    ax.set_xlabel("frame")
    ax.set_ylabel("label")
    for r in records:
        if r.position == 0 and r.frame:
            ax.axvline(r.frame - 0.5, color="0.8", ls=":", lw=0.8)
    ax2 = ax.twinx()
    ax2.plot(frames, [r.confidence for r in records], color="tab:red", lw=1.2, label="confidence")
    ax2.set_ylim(0, 1.05)
    ax2.set_ylabel("confidence")
    if title:
        ax.set_title(title)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_confusion(cm, path, title: str = ""):
    counts = cm.counts.astype(float)
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    n = len(cm.classes)
    fig, ax = plt.subplots(figsize=(0.35 * n + 2.5, 0.35 * n + 2))
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ticks = np.arange(n)
    ax.set_xticks(ticks, [str(c) for c in cm.classes], rotation=90, fontsize=7)
    ax.set_yticks(ticks, [str(c) for c in cm.classes], fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_ramp(profile: Sequence[float], path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(profile)), profile, marker="o", color="tab:red")
    ax.set_xlabel("position within window")
    ax.set_ylabel("mean confidence")
    ax.set_ylim(0, 1)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_comparison(rows, path):
    fig, ax = plt.subplots(figsize=(6, 0.5 * len(rows) + 1))
    ax.barh([r.method for r in rows][::-1], [100 * r.accuracy for r in rows][::-1], color="tab:blue")
    ax.set_xlabel("tracklet accuracy (%)")
    ax.set_xlim(0, 100)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
