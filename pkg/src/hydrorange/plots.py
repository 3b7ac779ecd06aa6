"""Matplotlib renderers for the report path.

Figures are written next to the delimited outputs: predicted vs. true range
over test segment indices (every 10th segment, like the plot.csv rows),
training loss history, and the ablation comparison.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

plt.rcParams.update(
    {
        "figure.figsize": (7.0, 3.4),
        "figure.dpi": 110,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 9,
        "legend.frameon": False,
    }
)


def save_predictions_figure(rows, path: str) -> str:
    """rows: (index, y_km, yhat_km) tuples, already decimated for display."""
    idx = [r[0] for r in rows]
    truth = [r[1] for r in rows]
    pred = [r[2] for r in rows]
    fig, ax = plt.subplots()
    ax.plot(idx, truth, "o-", ms=3, lw=1, label="ground truth", color="#1f77b4")
    ax.plot(idx, pred, "x", ms=4, label="predicted", color="#d62728")
    ax.set_xlabel("Index")
    ax.set_ylabel("Range (km)")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_history_figure(history, path: str) -> str:
    """history: (epoch, train_mse, val_mse) rows."""
    epochs = [h[0] for h in history]
    fig, ax = plt.subplots()
    ax.plot(epochs, [h[1] for h in history], label="train MSE")
    val = [h[2] for h in history]
    if any(v == v for v in val):  # skip if all NaN
        ax.plot(epochs, val, label="val MSE")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("MSE (km$^2$)")
    ax.set_yscale("log")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_ablation_figure(rows, path: str) -> str:
    """rows: dicts with 'label', 'mae_km', 'pcl5_percent'."""
    labels = [r["label"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    ax1.bar(labels, [r["mae_km"] for r in rows], color="#1f77b4")
    ax1.set_ylabel("MAE (km)")
    ax1.tick_params(axis="x", rotation=20)
    ax2.bar(labels, [r["pcl5_percent"] for r in rows], color="#2ca02c")
    ax2.set_ylabel("credible localizations (%)")
    ax2.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
