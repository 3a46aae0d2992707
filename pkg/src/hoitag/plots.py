"""Loss-curve and ablation bar-chart images."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .report import LAYOUTS, RunResult  # noqa: E402
from .trainer import TrainLog  # noqa: E402


class PlotError(ValueError):
    pass


def plot_loss_curve(tlog: TrainLog, out_dir, name: str | None = None) -> Path:
    if not tlog.rows:
        raise PlotError("training log is empty")
    stage = tlog.rows[0]["stage"]
    cols = ("loss_lm",) if stage == "caption" else ("loss_total", "loss_loc", "loss_act", "loss_box", "loss_entity")
    steps = [r["step"] for r in tlog.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in cols:
        ax.plot(steps, tlog.loss_sequence(c), label=c, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"{stage} stage")
    ax.legend()
    fig.tight_layout()
    path = Path(out_dir) / (name or f"loss_{stage}.png")
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ablation(runs: list[RunResult], out_dir, name: str = "ablation.png", kind: str = "rubric") -> Path:
    """Grouped bars: one group per metric, one bar per run."""
    if not runs:
        raise PlotError("no runs to plot")
    cols = LAYOUTS[kind]
    x = np.arange(len(cols))
    width = 0.8 / len(runs)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, r in enumerate(runs):
        ax.bar(x + i * width - 0.4 + width / 2, [r.values[c] for c in cols], width, label=r.model)
    ax.set_xticks(x)
    ax.set_xticklabels(cols)
    ax.legend()
    fig.tight_layout()
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
