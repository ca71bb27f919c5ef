"""Report figures rendered to files with matplotlib's Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curves(rows, path, title=None):
    """Per-epoch loss terms and pair cosines from a training log."""
    ep = [r["epoch"] for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key, label in (("loss", "total"), ("L_fc", "contrastive"), ("L_r", "reconstruction")):
        a.plot(ep, [r[key] for r in rows], label=label)
    a.set_xlabel("epoch")
    a.set_ylabel("loss")
    a.legend()
    b.plot(ep, [r["pos_r"] for r in rows], label="positive pairs")
    b.plot(ep, [r["neg_r"] for r in rows], label="negative pairs")
    b.set_xlabel("epoch")
    b.set_ylabel("mean cosine")
    b.set_ylim(-1.05, 1.05)
    b.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def ablation_bars(means, path):
    """Mean 1-NN accuracy and GMM purity per variant, in table order."""
    names = list(means)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(names)), 3.5))
    ax.bar(x - 0.2, [means[n]["one_nn_accuracy"] for n in names], 0.4, label="1-NN accuracy")
    ax.bar(x + 0.2, [means[n]["gmm_purity"] for n in names], 0.4, label="GMM purity")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def confusion(matrix, path):
    m = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(m, cmap="Blues")
    for (i, j), v in np.ndenumerate(m):
        ax.text(j, i, str(v), ha="center", va="center", fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
