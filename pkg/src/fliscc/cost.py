"""Per-round latency and energy of uplink transmission and local computation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class CostConfig:
    T_slot: float = 1e-3
    L: int = 14
    include_downlink: bool = False

    def __post_init__(self) -> None:
        if not self.T_slot > 0 or self.L < 1:
            raise ValueError("need T_slot > 0 and L >= 1")


@dataclass(frozen=True)
class RoundCost:
    comm_latency: float
    comp_latency: np.ndarray
    comm_energy: np.ndarray
    comp_energy: np.ndarray
    total_latency: float
    total_energy: float

    @property
    def max_comp_latency(self) -> float:
        return float(np.max(self.comp_latency))


def comm_latency(q: int, L: int = 14, T_slot: float = 1e-3) -> float:
    """Seconds to send ``q`` analog symbols, ``L`` per resource block of length ``T_slot``."""
    if q <= 0:
        raise ValueError("parameter count must be positive")
    return math.ceil(q / L) * T_slot


def comm_energy(power: float, t_comm: float) -> float:
    if power < 0 or t_comm < 0:
        raise ValueError("power and duration must be nonnegative")
    return power * t_comm


def comp_latency(cycles_per_sample: float, samples: float, cpu_freq: float, epochs: float = 1.0) -> float:
    if cpu_freq <= 0:
        raise ValueError("CPU frequency must be positive")
    if cycles_per_sample < 0 or samples < 0 or epochs < 0:
        raise ValueError("cycles, samples and epochs must be nonnegative")
    return epochs * cycles_per_sample * samples / cpu_freq


def comp_energy(cycles_per_sample: float, energy_coeff: float, cpu_freq: float, samples: float,
                epochs: float = 1.0) -> float:
    if min(cycles_per_sample, energy_coeff, cpu_freq, samples, epochs) < 0:
        raise ValueError("computation energy inputs must be nonnegative")
    return epochs * cycles_per_sample * energy_coeff * cpu_freq**2 * samples


def fedavg_epochs(tau: int, batch_size: int, samples: int) -> float:
    """Fraction of an epoch processed by ``tau`` mini-batch steps (batches capped at the dataset)."""
    if samples <= 0:
        return 0.0
    return tau * min(batch_size, samples) / samples


def round_cost(comp_latencies: Sequence[float], comp_energies: Sequence[float],
               comm_latency_s: float, comm_energies: Sequence[float],
               downlink_latency_s: float = 0.0) -> RoundCost:
    """Round latency is the slowest device plus the shared uplink slot; energy sums over devices.

    ``downlink_latency_s`` optionally charges the model broadcast; the
    server's transmit energy is not attributed to devices.
    """
    cl = np.asarray(comp_latencies, dtype=np.float64)
    ce = np.asarray(comp_energies, dtype=np.float64)
    me = np.asarray(comm_energies, dtype=np.float64)
    if cl.size == 0 or cl.shape != ce.shape or ce.shape != me.shape:
        raise ValueError("need matching, non-empty per-device cost vectors")
    return RoundCost(
        comm_latency=float(comm_latency_s),
        comp_latency=cl,
        comm_energy=me,
        comp_energy=ce,
        total_latency=float(cl.max() + comm_latency_s + downlink_latency_s),
        total_energy=float(np.sum(ce + me)),
    )
