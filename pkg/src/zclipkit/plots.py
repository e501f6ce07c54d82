"""Static SVG line plots: loss, norm before clipping, norm after clipping, clip fraction."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from zclipkit.metrics import clip_fraction_curve  # noqa: E402
from zclipkit.policies import StepRecord  # noqa: E402

# fixed salt and no date keep the SVG bytes reproducible
matplotlib.rcParams["svg.hashsalt"] = "zclipkit"


def plot_run(
    path: str | os.PathLike,
    records: Sequence[StepRecord],
    title: str = "",
    losses: Sequence[float] | None = None,
    window: int = 1000,
) -> None:
    steps = [r.step for r in records]
    panels = []
    if losses:
        panels.append(("training loss", steps[: len(losses)], list(losses)))
    panels.append(("grad norm (before clipping)", steps, [r.raw_norm for r in records]))
    panels.append(("grad norm (after clipping)", steps, [r.clipped_norm for r in records]))
    frac = clip_fraction_curve(records, window)
    panels.append((f"clip fraction (trailing {window})", [s for s, _ in frac], [f for _, f in frac]))

    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.2))
    for ax, (name, xs, ys) in zip(axes, panels):
        ax.plot(xs, ys, linewidth=0.8)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("step", fontsize=8)
        ax.tick_params(labelsize=7)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_curves(path: str | os.PathLike, curves: dict[str, Sequence[float]], title: str, ylabel: str) -> None:
    """Overlay several curves (e.g. EMA mean per alpha) on one axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, ys in curves.items():
        ax.plot(range(1, len(ys) + 1), ys, linewidth=0.8, label=label)
    ax.set_title(title, fontsize=10)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
