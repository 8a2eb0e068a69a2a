"""ROC figure and CSV export with the three sensitivity-threshold guide
lines (red 90%, yellow 95%, purple 97.5%)."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GUIDE_LINES = ((0.90, "red", "90%"), (0.95, "gold", "95%"), (0.975, "purple", "97.5%"))


def save_roc_csv(curve, path):
    with open(str(path), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "sensitivity", "specificity"])
        for t, se, sp in zip(curve.thresholds, curve.sensitivity, curve.specificity):
            writer.writerow([repr(float(t)), repr(float(se)), repr(float(sp))])


def save_roc_plot(curves: dict, path, title="Receiver operating characteristic"):
    """curves: mapping from display label to RocCurve."""
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    for label, curve in curves.items():
        fpr = 1.0 - curve.specificity
        ax.plot(fpr[::-1], curve.sensitivity[::-1], label=label, linewidth=1.5)
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    for level, color, text in GUIDE_LINES:
        ax.axhline(level, linestyle="--", color=color, linewidth=1.0)
        ax.annotate(text, xy=(1.0, level), ha="right", va="bottom", fontsize=8,
                    color=color)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(str(path), metadata={"Software": None})
    plt.close(fig)
