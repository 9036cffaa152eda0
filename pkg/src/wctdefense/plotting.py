"""Figures for experiment reports, rendered headless to PNG files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ExperimentReport  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _grid(report: ExperimentReport) -> np.ndarray:
    return np.array([[np.nan if v is None else v for v in row] for row in report.grid], dtype=float)


def _lines(ax, report: ExperimentReport, xlabel: str, ylabel: str = "accuracy"):
    g = _grid(report)
    x = np.arange(len(report.rows))
    for j, col in enumerate(report.columns):
        ax.plot(x, 100 * g[:, j], marker="o", label=col)
    ax.set_xticks(x, report.rows)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(f"{ylabel} (%)")


def _drift(ax, report):
    g = _grid(report)
    x = np.arange(len(report.columns))
    for i, row in enumerate(report.rows):
        ax.plot(x, 100 * g[i], marker="o", label=row)
    ax.set_xticks(x, report.columns)
    ax.set_xlabel("tap")
    ax.set_ylabel("nearest-neighbor accuracy (%)")


def _heatmap(ax, report):
    g = _grid(report)
    masked = np.ma.masked_invalid(100 * g)
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("0.85")
    im = ax.imshow(masked, cmap=cmap, vmin=0, vmax=100, aspect="auto")
    ax.set_xticks(range(len(report.columns)), report.columns)
    ax.set_yticks(range(len(report.rows)), report.rows)
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            text = "-" if np.isnan(g[i, j]) else f"{100 * g[i, j]:.1f}"
            ax.text(j, i, text, ha="center", va="center", fontsize=8,
                    color="black" if np.isnan(g[i, j]) or g[i, j] > 0.6 else "white")
    plt.colorbar(im, ax=ax, label="accuracy (%)")


def _bars(ax, report, rows=None):
    rows = rows or report.rows
    g = _grid(report)
    idx = [report.rows.index(r) for r in rows]
    width = 0.8 / len(report.columns)
    x = np.arange(len(rows))
    for j, col in enumerate(report.columns):
        ax.bar(x + (j - (len(report.columns) - 1) / 2) * width, 100 * np.nan_to_num(g[idx, j]), width, label=col)
    ax.set_xticks(x, rows)
    ax.set_ylabel("accuracy (%)")


def _ablation(ax, report):
    g = _grid(report)[:, 0]
    oracle = report.metadata.get("oracle", {})
    x = np.arange(len(report.rows))
    bars = ax.bar(x, 100 * g, color=["0.6" if oracle.get(r) else "C0" for r in report.rows])
    for b, r in zip(bars, report.rows):
        if oracle.get(r):
            b.set_hatch("//")
    ax.set_xticks(x, report.rows, rotation=30, ha="right")
    ax.set_ylabel("defended accuracy (%)")
    ax.set_title("hatched: oracle sources", fontsize=8, loc="right")


def plot_report(report: ExperimentReport, path) -> Path:
    """Render one report to ``path`` (PNG) and return the path."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.8))
        kind = report.kind
        if kind == "drift_table":
            _drift(ax, report)
            ax.legend()
        elif kind == "epsilon_sweep":
            _lines(ax, report, "epsilon")
            ax.legend()
        elif kind == "robustness_table":
            _bars(ax, report, [r for r in report.rows if r != "clean_gap"])
            ax.legend(fontsize=7, ncol=3)
        elif kind == "reference_ablation":
            _ablation(ax, report)
        else:
            _heatmap(ax, report)
        ax.set_title(f"{kind} ({report.dataset})" if report.dataset else kind, loc="left")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
