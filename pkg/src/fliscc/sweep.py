"""Parameter sweeps with seed replication and a median comparison table."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig
from .harness import ExperimentResult, RoundError, run_experiment

log = logging.getLogger(__name__)

AXES = {
    "gamma": "partition.gamma",
    "sigma_z": "channel.sigma_z",
    "eta": "train.eta",
    "tau": "train.tau",
    "schedule": "schedule.strategy",
}

TABLE_COLUMNS = ("axis", "value", "algorithm", "runs", "failed", "final_loss", "best_test_acc",
                 "final_test_loss", "rounds_to_target", "total_latency_s", "total_energy_j")


@dataclass
class SweepCell:
    value: Any
    algorithm: str
    seed: int
    result: ExperimentResult | None = None
    error: str | None = None

    def stats(self, target: float | None) -> dict[str, float]:
        r = self.result
        if r is None:
            return {}
        acc = np.array([m.test_acc for m in r.metrics] or [math.nan], dtype=np.float64)
        test_loss = [m.test_loss for m in r.metrics if not math.isnan(m.test_loss)]
        return {
            "final_loss": r.final_loss,
            "best_test_acc": float(np.nanmax(acc)) if np.any(~np.isnan(acc)) else math.nan,
            "final_test_loss": test_loss[-1] if test_loss else math.nan,
            "rounds_to_target": r.rounds_to(target) if target is not None else math.nan,
            "total_latency_s": float(sum(c.total_latency for c in r.costs)),
            "total_energy_j": float(sum(c.total_energy for c in r.costs)),
        }


@dataclass
class SweepResult:
    axis: str
    values: list[Any]
    cells: list[SweepCell] = field(default_factory=list)
    target: float | None = None

    def cell_results(self, value, algorithm: str) -> list[SweepCell]:
        return [c for c in self.cells if c.value == value and c.algorithm == algorithm]

    def median(self, value, algorithm: str, key: str) -> float:
        vals = [c.stats(self.target)[key] for c in self.cell_results(value, algorithm) if c.result is not None]
        return float(np.median(vals)) if vals else math.nan

    def table(self) -> list[dict[str, Any]]:
        rows = []
        algorithms = list(dict.fromkeys(c.algorithm for c in self.cells))
        for value in self.values:
            for alg in algorithms:
                cells = self.cell_results(value, alg)
                row = {"axis": self.axis, "value": value, "algorithm": alg, "runs": len(cells),
                       "failed": sum(c.result is None for c in cells)}
                for key in TABLE_COLUMNS[5:]:
                    row[key] = self.median(value, alg, key)
                rows.append(row)
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, TABLE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.table():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def parse_values(axis: str, raw: str) -> list[Any]:
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if axis == "schedule":
        return items
    if axis == "tau":
        return [int(v) for v in items]
    return [float(v) for v in items]


def cell_config(base: ExperimentConfig, axis: str, value, algorithm: str, seed: int) -> ExperimentConfig:
    overrides = {AXES[axis]: value, "algorithm": algorithm, "seed": seed, "output_dir": None}
    if axis == "gamma":
        overrides["partition.mode"] = "dirichlet"
    return base.replace(**overrides)


def run_sweep(base: ExperimentConfig, axis: str, values: Sequence[Any], replications: int = 5,
              algorithms: Sequence[str] | None = None, output_dir=None) -> SweepResult:
    """Run every (value, algorithm, seed) cell; a failing cell is recorded and the sweep continues.

    Replicates use seeds ``base.seed + r`` for r in ``range(replications)``.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    algorithms = list(algorithms or [base.algorithm])
    sweep = SweepResult(axis, list(values), target=base.target_loss)
    for value in values:
        for alg in algorithms:
            for r in range(replications):
                seed = base.seed + r
                cell = SweepCell(value, alg, seed)
                try:
                    cell.result = run_experiment(cell_config(base, axis, value, alg, seed))
                except (RoundError, ValueError) as exc:
                    log.warning("sweep cell %s=%r %s seed %d failed: %s", axis, value, alg, seed, exc)
                    cell.error = str(exc)
                sweep.cells.append(cell)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(sweep.to_csv())
        if base.figures and sweep.cells:
            from .plotting import plot_sweep
            plot_sweep(sweep, out)
    return sweep
