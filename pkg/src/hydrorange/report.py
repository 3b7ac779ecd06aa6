"""Report emission: metrics JSON, prediction CSVs and rendered figures.

``plot.csv`` keeps every 10th indexed test segment (index mod 10 == 0) so
range-over-index figures stay readable; the PNG next to it renders exactly
those rows.
"""

from __future__ import annotations

import os

from .errors import DataError
from .learn import MetricsReport
from .plots import save_predictions_figure

PLOT_EVERY = 10


def plot_rows(report: MetricsReport) -> list:
    return [row for row in report.predictions if row[0] % PLOT_EVERY == 0]


def emit_report(report: MetricsReport, out_dir: str, figures: bool = True) -> dict:
    """Write metrics.json, predictions.csv, plot.csv (and predictions.png)."""
    if not report.predictions:
        raise DataError("report holds no predictions")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    paths["metrics"] = os.path.join(out_dir, "metrics.json")
    with open(paths["metrics"], "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")

    paths["predictions"] = os.path.join(out_dir, "predictions.csv")
    with open(paths["predictions"], "w") as fh:
        fh.write("index,y_km,yhat_km\n")
        for idx, y, yhat in report.predictions:
            fh.write(f"{idx},{y:.6f},{yhat:.6f}\n")

    rows = plot_rows(report)
    paths["plot"] = os.path.join(out_dir, "plot.csv")
    with open(paths["plot"], "w") as fh:
        fh.write("index,y_km,yhat_km\n")
        for idx, y, yhat in rows:
            fh.write(f"{idx},{y:.6f},{yhat:.6f}\n")

    if figures and rows:
        paths["figure"] = save_predictions_figure(rows, os.path.join(out_dir, "predictions.png"))
    return paths
