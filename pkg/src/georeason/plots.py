"""Matplotlib figures written next to tabular reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from georeason.geodesy import LEVELS, EvaluationReport  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_accuracy(report: EvaluationReport, path, title: str = "Accuracy by level") -> Path:
    levels = list(reversed(LEVELS))  # Continent first, as in the tabular report
    values = [report.accuracy_pct[lv] for lv in levels]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        bars = ax.bar([f"{lv.label}\n{lv.threshold_km:g} km" for lv in levels], values, color="#3b6ea5")
        ax.bar_label(bars, labels=[f"{v:.1f}" for v in values], padding=2, fontsize=8)
        ax.set_ylim(0, 105)
        ax.set_ylabel("accuracy (%)")
        ax.set_title(f"{title} (n={report.n})")
        return _save(fig, path)


def plot_distance_histogram(distances_km: Sequence[float], path, title: str = "Error distance") -> Path:
    d = np.asarray([x for x in distances_km if np.isfinite(x)], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        if d.size:
            lo = max(min(d.min(), 1.0), 1e-3)
            hi = max(d.max(), lo * 10)
            bins = np.logspace(np.log10(lo), np.log10(hi), 20)
            ax.hist(np.clip(d, lo, None), bins=bins, color="#a5533b")
            ax.set_xscale("log")
            for lv in LEVELS:
                ax.axvline(lv.threshold_km, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("distance (km)")
        ax.set_ylabel("count")
        ax.set_title(title)
        return _save(fig, path)


def plot_reasoning_lengths(word_counts: Sequence[int], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        if len(word_counts):
            ax.hist(word_counts, bins="auto", color="#5a8a4f")
            ax.axvline(float(np.mean(word_counts)), color="k", lw=1)
        ax.set_xlabel("reasoning length (words)")
        ax.set_ylabel("count")
        return _save(fig, path)
