"""Figure rendering for the report path. All plots go to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import ConfusionMatrix, CvResult
from .optim import EpochStats

DPI = 150


def plot_confusion(cm: ConfusionMatrix, path: str | Path, title: str = "Confusion matrix") -> None:
    counts = np.array([[cm.tp, cm.fn], [cm.fp, cm.tn]])
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(counts, cmap="Blues")
    for (i, j), value in np.ndenumerate(counts):
        color = "white" if value > counts.max() / 2 else "black"
        ax.text(j, i, f"{value:,}", ha="center", va="center", color=color)
    ax.set_xticks([0, 1], ["plexus", "no plexus"])
    ax.set_yticks([0, 1], ["plexus", "no plexus"])
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Actual")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_roc(scores: np.ndarray, labels: np.ndarray, path: str | Path, auc: float | None = None) -> None:
    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = np.asarray(labels)[order]
    tp = np.concatenate([[0], np.cumsum(sorted_labels == 1)])
    fp = np.concatenate([[0], np.cumsum(sorted_labels == 0)])
    tpr = tp / max(tp[-1], 1)
    fpr = fp / max(fp[-1], 1)
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    ax.plot(fpr, tpr, lw=1.8)
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    title = "ROC curve" if auc is None else f"ROC curve (AUC = {auc:.4f})"
    ax.set_title(title)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_fold_metrics(result: CvResult, path: str | Path) -> None:
    folds = [fr.fold for fr in result.folds]
    accs = [fr.report.accuracy for fr in result.folds]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.bar([str(f) for f in folds], accs, color="#4878a8")
    ax.axhline(result.pooled.accuracy, color="#b04040", ls="--", lw=1.2,
               label=f"pooled {result.pooled.accuracy:.3f}")
    ax.set_xlabel("Fold")
    ax.set_ylabel("Accuracy")
    ax.set_ylim(0, 1.05)
    ax.set_title("Per-fold test accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_history(history: list[EpochStats], path: str | Path) -> None:
    epochs = [h.epoch for h in history]
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.2))
    axes[0].plot(epochs, [h.train_loss for h in history], label="train")
    axes[0].plot(epochs, [h.val_loss for h in history], label="val")
    axes[0].set_xlabel("Epoch")
    axes[0].set_ylabel("Loss")
    axes[0].legend()
    axes[1].plot(epochs, [h.val_acc for h in history], color="#2a7a2a")
    axes[1].set_xlabel("Epoch")
    axes[1].set_ylabel("Validation accuracy")
    axes[1].set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
