"""Report figures, rendered headless to files."""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import FrocCurve


def froc_figure(
    curves: dict[str, FrocCurve],
    path,
    bands: Optional[dict[str, tuple[np.ndarray, np.ndarray]]] = None,
    title: str = "FROC",
) -> None:
    """Sensitivity vs FP/scan on a log-2 x axis, one line per label.

    Bootstrap bands, where given, are drawn as dashed envelopes around
    their curve. The file format follows the path suffix (svg, png, pdf).
    """
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for label, curve in curves.items():
        rates = np.asarray(curve.target_fp_rates)
        (line,) = ax.plot(
            rates, curve.target_sensitivities, marker="o", markersize=3.5, label=label
        )
        if bands and label in bands:
            lower, upper = bands[label]
            ax.plot(rates, lower, linestyle="--", linewidth=0.9, color=line.get_color())
            ax.plot(rates, upper, linestyle="--", linewidth=0.9, color=line.get_color())
    ax.set_xscale("log", base=2)
    first = next(iter(curves.values()))
    ax.set_xticks(list(first.target_fp_rates))
    ax.set_xticklabels([f"{r:g}" for r in first.target_fp_rates])
    ax.set_xlabel("false positives per scan")
    ax.set_ylabel("sensitivity")
    ax.set_ylim(0.0, 1.02)
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def loss_figure(steps: Sequence[int], totals: Sequence[float], path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(list(steps), list(totals), linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
