"""Figures written next to the CSV reports (PNG, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# PNG metadata carries no timestamp; fixed Software keeps reruns byte-identical.
_META = {"Software": "gcnfuse"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_curves(states, path) -> Path:
    """Training loss and testing accuracy against iteration (and seconds when recorded)."""
    timed = all(s.seconds for s in states)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3 if timed else 2, figsize=(9 if timed else 6.5, 2.6))
        for k, s in enumerate(states):
            it = np.arange(1, len(s.loss) + 1)
            axes[0].plot(it, s.loss, lw=1, label=f"fold {k}")
            if s.test_accuracy:
                axes[1].plot(it, s.test_accuracy, lw=1)
            if timed:
                axes[2].plot(s.seconds, s.loss, lw=1)
        axes[0].set(xlabel="iteration", ylabel="training loss")
        axes[1].set(xlabel="iteration", ylabel="testing accuracy", ylim=(0, 1.02))
        if timed:
            axes[2].set(xlabel="time (s)", ylabel="training loss")
        axes[0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_confusion(cm, path, class_names=None) -> Path:
    cm = np.asarray(cm)
    n = cm.shape[0]
    names = class_names or [str(c) for c in range(n)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.6 * n, 0.8 + 0.6 * n))
        ax.imshow(cm, cmap="Blues")
        top = cm.max() if cm.size else 0
        for i in range(n):
            for j in range(n):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                        color="white" if cm[i, j] > top / 2 else "black")
        ax.set_xticks(range(n), names)
        ax.set_yticks(range(n), names)
        ax.set(xlabel="predicted label", ylabel="true label")
        fig.tight_layout()
        return _save(fig, path)


def plot_sweep(result, path) -> Path:
    """Accuracy per aggregation against alpha, with graph density on a twin axis."""
    alphas = list(result.grid.alphas)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for kind in result.grid.aggregations:
            ax.plot(alphas, [result.cell(a, kind).accuracy for a in alphas], marker="o", lw=1, label=kind)
        ax.set(xlabel="alpha", ylabel="accuracy", ylim=(0, 1.02))
        twin = ax.twinx()
        twin.plot(alphas, [result.density(a) for a in alphas], color="grey", ls="--", lw=1)
        twin.set_ylabel("graph density", color="grey")
        twin.set_ylim(0, 1.02)
        ax.legend(frameon=False, loc="lower left")
        fig.tight_layout()
        return _save(fig, path)


def plot_saliency(image, saliency, path) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(5, 2.6))
        axes[0].imshow(image, cmap="gray", vmin=0, vmax=1)
        axes[0].set_title("input")
        axes[1].imshow(saliency, cmap="hot", vmin=0, vmax=1)
        axes[1].set_title("saliency")
        for ax in axes:
            ax.set_axis_off()
        fig.tight_layout()
        return _save(fig, path)
