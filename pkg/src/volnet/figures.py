"""Headless matplotlib renderings of ROC curves and training logs.

Every report CSV the command-line tool writes gets a PNG companion from
here, so runs on remote machines leave something viewable behind.  The
Agg backend is forced before pyplot loads; no display is ever required.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import RocCurve


def save_roc_figure(path, curve: RocCurve, auc_value: float | None = None,
                    operating_point=None) -> None:
    """Staircase ROC plot with the chance diagonal for reference.

    `operating_point` is an optional (fpr, tpr) pair to mark, typically
    the Youden-selected threshold.
    """
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.plot(curve.fpr, curve.tpr, drawstyle="steps-post", color="#1f6fb4", lw=1.8)
    ax.plot([0.0, 1.0], [0.0, 1.0], ls="--", color="#999999", lw=1.0)
    if operating_point is not None:
        fpr, tpr = operating_point
        ax.plot([fpr], [tpr], marker="o", color="#c23b22", ms=6.0)
        ax.annotate(
            f"({fpr:.3f}, {tpr:.3f})",
            xy=(fpr, tpr),
            xytext=(8, -12),
            textcoords="offset points",
            fontsize=8,
        )
    title = "ROC curve" if auc_value is None else f"ROC curve (AUC = {auc_value:.4f})"
    ax.set_title(title)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_aspect("equal")
    ax.grid(True, lw=0.3, alpha=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_figure(path, history) -> None:
    """Loss and accuracy per epoch on twin axes; `history` is EpochStats."""
    fig, ax_loss = plt.subplots(figsize=(6.4, 4.0))
    epochs = [s.epoch + 1 for s in history]
    ax_loss.plot(epochs, [s.mean_loss for s in history],
                 color="#1f6fb4", marker="o", ms=3.0, label="mean loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss", color="#1f6fb4")
    ax_loss.tick_params(axis="y", labelcolor="#1f6fb4")
    ax_acc = ax_loss.twinx()
    ax_acc.plot(epochs, [s.train_accuracy for s in history],
                color="#c23b22", marker="s", ms=3.0, label="train accuracy")
    ax_acc.set_ylabel("train accuracy", color="#c23b22")
    ax_acc.tick_params(axis="y", labelcolor="#c23b22")
    ax_acc.set_ylim(-0.02, 1.02)
    ax_loss.grid(True, lw=0.3, alpha=0.5)
    ax_loss.set_title("training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
