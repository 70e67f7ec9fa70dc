"""Figures written next to the CSV reports (PNG, headless backend)."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_mfm_histograms(rows, path):
    """One column per MFM layer: activation values on top, gradients below.

    The exact-zero bin is drawn as a separate bar annotated with its share.
    """
    grouped = defaultdict(list)
    for r in rows:
        grouped[(r.layer, r.kind)].append(r)
    layers = list(dict.fromkeys(r.layer for r in rows))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, max(len(layers), 1), figsize=(2.6 * max(len(layers), 1), 4.4),
                                 squeeze=False)
        for col, layer in enumerate(layers):
            for row, kind in enumerate(("value", "gradient")):
                ax = axes[row][col]
                bins = grouped[(layer, kind)]
                total = sum(b.count for b in bins) or 1
                zero = [b for b in bins if b.lo == b.hi]
                rest = [b for b in bins if b.lo != b.hi]
                if rest:
                    ax.bar([b.lo for b in rest], [b.count / total for b in rest],
                           width=[b.hi - b.lo for b in rest], align="edge", color="0.45")
                if zero and zero[0].count:
                    frac = zero[0].count / total
                    ax.axvline(0.0, color="C3", lw=1.5)
                    ax.text(0.98, 0.92, f"zero: {frac:.1%}", transform=ax.transAxes,
                            ha="right", color="C3")
                ax.set_title(f"{layer} {kind}")
                ax.set_yscale("log" if kind == "gradient" else "linear")
        axes[0][0].set_ylabel("fraction")
        axes[1][0].set_ylabel("fraction")
        _save(fig, path)


def plot_training_log(rows, path):
    it = np.array([r.iter for r in rows])
    loss = np.array([r.loss for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(it, loss, lw=0.8, color="0.3", label="train loss")
        ax.set_xlabel("iteration")
        ax.set_ylabel("softmax loss")
        val = [(r.iter, r.val_accuracy) for r in rows if r.val_accuracy is not None]
        if val:
            ax2 = ax.twinx()
            ax2.plot(*zip(*val), "o-", color="C0", ms=3, label="val accuracy")
            ax2.set_ylabel("val accuracy")
            ax2.set_ylim(0, 1)
        _save(fig, path)


def plot_roc(scores, labels, path, far_marks=(0.001, 0.01)):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    thr = np.unique(scores)[::-1]
    pos, neg = scores[labels], scores[~labels]
    tpr = np.array([np.mean(pos >= t) for t in thr]) if pos.size else np.zeros(thr.size)
    fpr = np.array([np.mean(neg >= t) for t in thr]) if neg.size else np.zeros(thr.size)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        ax.step(np.r_[0, fpr], np.r_[0, tpr], where="post", color="0.2")
        for f in far_marks:
            ax.axvline(f, ls=":", color="0.6")
        ax.set_xscale("symlog", linthresh=1e-3)
        ax.set_xlabel("false accept rate")
        ax.set_ylabel("true positive rate")
        _save(fig, path)


def plot_latency(times_ms, path, reference_ms=None):
    times_ms = np.asarray(times_ms)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.plot(np.arange(1, times_ms.size + 1), times_ms, ".-", lw=0.6, color="0.3")
        ax.axhline(times_ms.mean(), color="C0", lw=1, label=f"mean {times_ms.mean():.1f} ms")
        if reference_ms is not None:
            ax.axhline(reference_ms, color="C3", ls="--", lw=1, label=f"reference {reference_ms} ms")
        ax.set_xlabel("forward pass")
        ax.set_ylabel("ms / image")
        ax.legend(frameon=False)
        _save(fig, path)
