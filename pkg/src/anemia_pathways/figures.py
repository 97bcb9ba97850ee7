"""Report figures rendered to image files next to the delimited outputs.

Matplotlib is imported lazily with the Agg backend so that importing this
module (or the package) never requires a display, and commands that do not
render stay free of the dependency. PNG output carries no timestamps, so
re-rendering the same data produces byte-identical files.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .catalog import CLASS_COUNT, DiagnosisClass
from .evaluate import MetricsReport
from .sweeps import CellResult, aggregate_sweep

__all__ = [
    "sweep_figure",
    "confusion_figure",
    "training_curve_figure",
]

_AXIS_LABELS = {
    "missingness": "missingness level",
    "noise": "noise level",
    "noise+missingness": "missingness level (fixed noise)",
    "train-size": "train set fraction",
}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def sweep_figure(rows: Sequence[CellResult], stat: str, path,
                 title: Optional[str] = None) -> str:
    """Accuracy-versus-level curves, one line per model.

    `stat` "median" draws the per-cell median; "mean95" draws the mean with
    a shaded 95% confidence band. Cells with no successful run leave a gap.
    """
    if not rows:
        raise ValueError("cannot render an empty sweep")
    plt = _pyplot()
    aggregates = aggregate_sweep(rows, stat)
    models = []
    for agg in aggregates:
        if agg.model not in models:
            models.append(agg.model)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for model in models:
        points = [a for a in aggregates
                  if a.model == model and a.accuracy is not None]
        levels = [a.level for a in points]
        values = [a.accuracy for a in points]
        line, = ax.plot(levels, values, marker="o", label=model)
        if stat == "mean95" and points:
            ax.fill_between(levels, [a.ci_low for a in points],
                            [a.ci_high for a in points],
                            color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel(_AXIS_LABELS.get(rows[0].kind, "level"))
    ax.set_ylabel("accuracy (%)")
    ax.set_title(title or f"{rows[0].kind} sweep "
                          f"({'median' if stat == 'median' else 'mean ± 95% CI'})")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def confusion_figure(report: MetricsReport, path,
                     title: Optional[str] = None) -> str:
    """Heatmap of the 8x9 confusion matrix (9th column: no diagnosis)."""
    plt = _pyplot()
    matrix = np.asarray(report.confusion, dtype=np.int64)
    slugs = [DiagnosisClass(c).slug for c in range(CLASS_COUNT)]
    fig, ax = plt.subplots(figsize=(7.2, 5.6))
    image = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(CLASS_COUNT + 1), slugs + ["no_diagnosis"],
                  rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(CLASS_COUNT), slugs, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = matrix.max() / 2.0 if matrix.max() else 0.5
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(matrix[i, j]), ha="center", va="center",
                    fontsize=7,
                    color="white" if matrix[i, j] > threshold else "black")
    ax.set_title(title or f"confusion matrix (accuracy {report.accuracy:.2f}%)")
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def training_curve_figure(evaluations: Sequence, losses: Sequence, path,
                          title: Optional[str] = None) -> str:
    """Validation accuracy and smoothed training loss over one run."""
    plt = _pyplot()
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6.4, 5.6), sharex=False)
    if evaluations:
        steps = [int(e[0]) for e in evaluations]
        accs = [float(e[1]) for e in evaluations]
        top.plot(steps, accs, marker="o", color="tab:blue")
    top.set_xlabel("environment step")
    top.set_ylabel("validation accuracy (%)")
    top.grid(True, alpha=0.3)
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size:
        window = max(1, losses.size // 200)
        kernel = np.ones(window) / window
        smooth = np.convolve(losses, kernel, mode="valid")
        bottom.plot(np.arange(smooth.size) + window, smooth,
                    color="tab:orange")
        bottom.set_yscale("log")
    bottom.set_xlabel("gradient step")
    bottom.set_ylabel("loss (smoothed)")
    bottom.grid(True, alpha=0.3)
    fig.suptitle(title or "training run")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
