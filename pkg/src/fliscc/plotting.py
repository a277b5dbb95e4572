"""Figures written next to the delimited outputs of runs and sweeps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}
ALG_COLORS = {"fedavg": "#1f77b4", "fedsgd": "#d62728"}
# PNG metadata without a timestamp keeps repeated runs byte-identical
PNG_META = {"Software": None}


def _save(fig, path: Path) -> None:
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def plot_run(result, out_dir) -> list[Path]:
    """Loss, test accuracy and cost curves of one experiment."""
    out = Path(out_dir)
    rounds = np.array([m.round for m in result.metrics])
    loss = np.array([m.loss for m in result.metrics])
    test_loss = np.array([m.test_loss for m in result.metrics])
    test_acc = np.array([m.test_acc for m in result.metrics])
    color = ALG_COLORS.get(result.config.algorithm, "k")
    written = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(rounds, loss, color=color, label="train loss")
        ok = ~np.isnan(test_loss)
        if ok.any():
            ax.plot(rounds[ok], test_loss[ok], color=color, ls="--", label="test loss")
        ax.set_xlabel("round")
        ax.set_ylabel("loss")
        if np.all(loss > 0):
            ax.set_yscale("log")
        ax.legend()
        ax.set_title(result.config.algorithm)
        _save(fig, out / "loss.png")
        written.append(out / "loss.png")

        ok = ~np.isnan(test_acc)
        if ok.any():
            fig, ax = plt.subplots()
            ax.plot(rounds[ok], test_acc[ok], color=color)
            ax.set_xlabel("round")
            ax.set_ylabel("test accuracy")
            _save(fig, out / "accuracy.png")
            written.append(out / "accuracy.png")

        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.5))
        ax1.plot(result.cumulative_latency(), loss, color=color)
        ax1.set_xlabel("cumulative latency [s]")
        ax1.set_ylabel("train loss")
        ax2.plot(result.cumulative_energy(), loss, color=color)
        ax2.set_xlabel("cumulative energy [J]")
        _save(fig, out / "cost.png")
        written.append(out / "cost.png")
    return written


def plot_sweep(sweep, out_dir) -> Path:
    """Median final loss per swept value, one line per algorithm."""
    out = Path(out_dir)
    rows = sweep.table()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for alg in dict.fromkeys(r["algorithm"] for r in rows):
            sel = [r for r in rows if r["algorithm"] == alg]
            labels = [str(r["value"]) for r in sel]
            ax.plot(range(len(sel)), [r["final_loss"] for r in sel], marker="o",
                    color=ALG_COLORS.get(alg), label=alg)
            ax.set_xticks(range(len(sel)), labels)
        ax.set_xlabel(sweep.axis)
        ax.set_ylabel("median final loss")
        ax.legend()
        _save(fig, out / "sweep.png")
    return out / "sweep.png"
