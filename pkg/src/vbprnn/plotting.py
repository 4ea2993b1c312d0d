"""Static SVG line plots.

Figures are written with a fixed hash salt and without a date stamp so
that identical data re-renders to identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "svg.hashsalt": "vbprnn",
    "svg.fonttype": "none",
    "font.size": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 0.9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "vbprnn"})
    plt.close(fig)
    return path


def trajectory_figure(path, target: np.ndarray, generated: dict[str, np.ndarray],
                      title: str = "", labels: dict[str, str] | None = None) -> Path:
    """x and y against time: the target on top, one row per generated run."""
    rows = [("target", np.asarray(target))] + [(k, np.asarray(v)) for k, v in generated.items()]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(len(rows), 1, figsize=(6.0, 1.4 * len(rows)), sharex=True, squeeze=False)
        for ax, (name, pts) in zip(axes[:, 0], rows):
            steps = np.arange(1, len(pts) + 1)
            ax.plot(steps, pts[:, 0], label="x", color="tab:blue")
            ax.plot(steps, pts[:, 1], label="y", color="tab:orange")
            ax.set_ylim(0.0, 1.0)
            text = name if not labels or name not in labels else f"{name}  {labels[name]}"
            ax.set_ylabel(name)
            ax.set_title(text, loc="left", fontsize=7)
        axes[0, 0].legend(loc="upper right", ncol=2, frameon=False)
        axes[-1, 0].set_xlabel("step")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def sigma_figure(path, series: dict[str, np.ndarray], title: str = "") -> Path:
    """Sigma traces (steps 2..T), one panel per condition, one line per unit."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(len(series), 1, figsize=(6.0, 1.3 * len(series)), sharex=True, squeeze=False)
        for ax, (name, s) in zip(axes[:, 0], series.items()):
            s = np.atleast_2d(np.asarray(s).T).T
            steps = np.arange(2, len(s) + 2)
            for u in range(s.shape[1]):
                ax.plot(steps, s[:, u], label=f"unit {u + 1}")
            ax.set_ylabel(name)
        axes[0, 0].legend(loc="upper right", ncol=4, frameon=False)
        axes[-1, 0].set_xlabel("step")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def metric_figure(path, w_values: list[float], metrics: dict[str, list[float]]) -> Path:
    """One panel per metric against the meta-prior."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.0 * len(metrics), 2.4), squeeze=False)
        pos = np.arange(len(w_values))
        for ax, (name, vals) in zip(axes[0], metrics.items()):
            ax.plot(pos, vals, marker="o")
            ax.set_xticks(pos, [repr(w) for w in w_values])
            ax.set_xlabel("W")
            ax.set_title(name)
        fig.tight_layout()
        return _save(fig, path)


def training_figure(path, logs: dict[str, list]) -> Path:
    """Lower bound per epoch for each run; ``logs`` maps run name to EpochRecords."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 2.6))
        for name, recs in logs.items():
            ax.plot([r.epoch for r in recs], [r.L for r in recs], label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("lower bound per sequence")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
