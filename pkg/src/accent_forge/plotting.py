"""Bubble plots of confusion matrices, rendered straight to PNG files."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "font_size": 9,
    "tick_size": 8,
    "bubble_max": 900.0,  # marker area (pt^2) of the largest cell
    "cmap": "Blues",
}


def _figsize(n_rows: int, n_cols: int):
    return (1.2 + 0.45 * n_cols, 1.0 + 0.45 * n_rows)


def bubble_confusion(matrix, row_labels: Sequence[str], path, title: str = "",
                     col_labels: Sequence[str] | None = None) -> Path:
    """Draw one bubble per cell; area and colour both scale with the row-normalized count.

    Rows are true labels, columns predicted labels.  Rows with no utterances
    are drawn empty.
    """
    mat = np.asarray(matrix, dtype=np.float64)
    col_labels = list(row_labels if col_labels is None else col_labels)
    if mat.shape != (len(row_labels), len(col_labels)):
        raise ValueError(f"matrix shape {mat.shape} does not match the labels")
    totals = mat.sum(axis=1, keepdims=True)
    frac = np.divide(mat, totals, out=np.zeros_like(mat), where=totals > 0)

    fig = Figure(figsize=_figsize(*mat.shape))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    rows, cols = np.nonzero(frac)
    ax.scatter(cols, rows, s=STYLE["bubble_max"] * frac[rows, cols], c=frac[rows, cols],
               cmap=STYLE["cmap"], vmin=0.0, vmax=1.0, edgecolors="0.3", linewidths=0.5)
    ax.set_xticks(range(len(col_labels)))
    ax.set_xticklabels(col_labels, fontsize=STYLE["tick_size"], rotation=90)
    ax.set_yticks(range(len(row_labels)))
    ax.set_yticklabels(row_labels, fontsize=STYLE["tick_size"])
    ax.set_xlim(-0.6, len(col_labels) - 0.4)
    ax.set_ylim(len(row_labels) - 0.4, -0.6)
    ax.set_xlabel("predicted", fontsize=STYLE["font_size"])
    ax.set_ylabel("true", fontsize=STYLE["font_size"])
    ax.set_aspect("equal")
    ax.grid(True, color="0.9", linewidth=0.5)
    ax.set_axisbelow(True)
    if title:
        ax.set_title(title, fontsize=STYLE["font_size"])
    fig.tight_layout()
    path = Path(path)
    # no Software tag, so identical inputs give identical bytes
    fig.savefig(path, format="png", dpi=120, metadata={"Software": None})
    return path
