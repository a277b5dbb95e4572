"""Sample-arrival schedules, label-skewed partitions and the per-round sensing step."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import SensingSchedule
from .datasets import SampleBatch
from .rng import PARTITION, stream

STRATEGIES = ("uniform", "front_loaded", "all_at_start", "explicit")


class ScheduleMismatchError(ValueError):
    """A device stream cannot supply the samples its schedule asks for."""


def _uniform_split(total: int, rounds: int) -> np.ndarray:
    base, rem = divmod(int(total), rounds)
    out = np.full(rounds, base, dtype=np.int64)
    out[:rem] += 1
    return out


def build_schedule(strategy: str, total_per_device: int | Sequence[int], N: int, T: int,
                   matrix=None, initial_sizes=None) -> SensingSchedule:
    """Build the N x T matrix of new-sample counts.

    ``uniform`` spreads each total evenly, handing the remainder to the
    earliest rounds; ``all_at_start`` senses everything in round 1;
    ``front_loaded`` senses ``ceil(total / 2)`` in round 1 and spreads the
    rest uniformly over rounds 2..T; ``explicit`` takes ``matrix`` verbatim.
    """
    if N < 1 or T < 0:
        raise ValueError("need N >= 1 and T >= 0")
    if strategy == "explicit":
        if matrix is None:
            raise ValueError("explicit schedule needs a matrix")
        m = np.asarray(matrix)
        if m.shape != (N, T):
            raise ValueError(f"explicit schedule has shape {m.shape}, expected {(N, T)}")
        if np.any(m < 0):
            raise ValueError("explicit schedule has negative entries")
        return SensingSchedule(m, initial_sizes)

    totals = np.broadcast_to(np.asarray(total_per_device, dtype=np.int64), (N,))
    if np.any(totals < 0):
        raise ValueError("total_per_device must be nonnegative")
    counts = np.zeros((N, T), dtype=np.int64)
    if T == 0:
        return SensingSchedule(counts, initial_sizes)
    for n, total in enumerate(totals):
        if strategy == "uniform":
            counts[n] = _uniform_split(total, T)
        elif strategy == "all_at_start":
            counts[n, 0] = total
        elif strategy == "front_loaded":
            first = -(-int(total) // 2)
            counts[n, 0] = first
            if T > 1:
                counts[n, 1:] = _uniform_split(total - first, T - 1)
            else:
                counts[n, 0] = total
        else:
            raise ValueError(f"unknown schedule strategy {strategy!r}; choose from {STRATEGIES}")
    return SensingSchedule(counts, initial_sizes)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"partition mode must be 'iid' or 'dirichlet', got {self.mode!r}")
        if self.mode == "dirichlet" and not self.gamma > 0:
            raise ValueError("Dirichlet concentration gamma must be positive")


def _largest_remainder(total: int, p: np.ndarray) -> np.ndarray:
    raw = total * p
    out = np.floor(raw).astype(np.int64)
    short = total - out.sum()
    if short:
        order = np.argsort(-(raw - out), kind="stable")
        out[order[:short]] += 1
    return out


def _draw_with_capacity(want: int, mix: np.ndarray, capacity: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Class counts summing to ``want`` that follow ``mix`` but never exceed ``capacity``."""
    counts = np.zeros_like(capacity)
    while want > 0:
        room = capacity - counts
        p = np.where(room > 0, mix, 0.0)
        if p.sum() <= 0:
            p = (room > 0).astype(np.float64)
            if p.sum() == 0:
                raise ValueError("pool exhausted while assigning samples")
        draw = np.minimum(rng.multinomial(want, p / p.sum()), room)
        counts += draw
        want -= int(draw.sum())
    return counts


def partition_assign(pool: SampleBatch, spec: PartitionSpec, N: int,
                     sizes: Sequence[int] | None = None) -> list[np.ndarray]:
    """Split pool indices into ``N`` disjoint per-device arrival streams.

    Without ``sizes`` the whole pool is distributed: IID deals each class
    round-robin (class histograms differ by at most one), Dirichlet splits
    every class across devices with proportions drawn from
    ``Dirichlet(gamma * 1_N)``. With ``sizes`` each device receives exactly
    ``sizes[n]`` samples whose label mix is the pool's class frequencies
    (IID) or a per-device draw from ``Dirichlet(gamma * 1_C)``.
    """
    n_pool = len(pool)
    if n_pool == 0:
        raise ValueError("empty pool")
    if N < 1 or N > n_pool:
        raise ValueError(f"cannot split {n_pool} samples across {N} devices")
    rng = stream(spec.seed, PARTITION)
    labels = pool.labels
    if np.issubdtype(labels.dtype, np.integer):
        classes = np.unique(labels)
        by_class = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    elif spec.mode == "dirichlet":
        raise ValueError("Dirichlet partitioning needs integer class labels")
    else:
        classes = np.array([0])
        by_class = [rng.permutation(n_pool)]

    streams: list[list[np.ndarray]] = [[] for _ in range(N)]
    if sizes is None:
        if spec.mode == "iid":
            dealt = np.concatenate(by_class)
            for n in range(N):
                streams[n].append(dealt[n::N])
        else:
            for idx in by_class:
                p = rng.dirichlet(np.full(N, spec.gamma))
                cuts = np.floor(np.cumsum(p)[:-1] * idx.size).astype(np.int64)
                for n, part in enumerate(np.split(idx, cuts)):
                    streams[n].append(part)
    else:
        want = np.broadcast_to(np.asarray(sizes, dtype=np.int64), (N,))
        if want.sum() > n_pool:
            raise ValueError(f"devices need {want.sum()} samples but the pool holds {n_pool}")
        capacity = np.array([idx.size for idx in by_class], dtype=np.int64)
        used = np.zeros_like(capacity)
        freq = capacity / capacity.sum()
        for n in range(N):
            if spec.mode == "iid":
                target = _largest_remainder(int(want[n]), freq)
                if np.any(target > capacity - used):
                    target = _draw_with_capacity(int(want[n]), freq, capacity - used, rng)
            else:
                mix = rng.dirichlet(np.full(classes.size, spec.gamma))
                target = _draw_with_capacity(int(want[n]), mix, capacity - used, rng)
            for c, k in enumerate(target):
                streams[n].append(by_class[c][used[c]:used[c] + k])
            used += target

    out = []
    for parts in streams:
        idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        out.append(rng.permutation(idx).astype(np.int64))
    return out


def label_tv_distance(labels: np.ndarray, streams: Sequence[np.ndarray], num_classes: int) -> float:
    """Mean total-variation distance of per-device label histograms from uniform."""
    uniform = np.full(num_classes, 1.0 / num_classes)
    tv = []
    for idx in streams:
        if idx.size == 0:
            continue
        h = np.bincount(labels[idx], minlength=num_classes) / idx.size
        tv.append(0.5 * np.abs(h - uniform).sum())
    return float(np.mean(tv))


@dataclass(frozen=True)
class DeviceState:
    """One device: its arrival stream, how much of it has been sensed, and hardware constants.

    The cumulative dataset is always the first ``size`` samples of ``stream``,
    which makes growth append-only by construction.
    """

    id: int
    stream: SampleBatch
    size: int = 0
    local_model: np.ndarray | None = None
    cycles_per_sample: float = 1e4
    energy_coeff: float = 1e-28
    cpu_freq: float = 1e9
    max_power: float = 10.0

    def __post_init__(self) -> None:
        for name in ("cycles_per_sample", "energy_coeff", "cpu_freq", "max_power"):
            if not getattr(self, name) > 0:
                raise ValueError(f"device {self.id}: {name} must be positive")
        if not 0 <= self.size <= len(self.stream):
            raise ScheduleMismatchError(f"device {self.id}: size {self.size} exceeds stream length {len(self.stream)}")

    @property
    def data(self) -> SampleBatch:
        return SampleBatch(self.stream.features[: self.size], self.stream.labels[: self.size])

    def window(self, start: int, stop: int) -> SampleBatch:
        return SampleBatch(self.stream.features[start:stop], self.stream.labels[start:stop])


def sense(device: DeviceState, t: int, schedule: SensingSchedule) -> DeviceState:
    """Grow the device's cumulative dataset by its round-``t`` arrivals."""
    prev = int(schedule.sizes_at(t - 1)[device.id])
    if device.size != prev:
        raise ScheduleMismatchError(f"device {device.id} holds {device.size} samples, schedule expects {prev} before round {t}")
    new = int(schedule.new_at(t)[device.id])
    if new == 0:
        return device
    if prev + new > len(device.stream):
        raise ScheduleMismatchError(f"device {device.id} stream exhausted in round {t}")
    return replace(device, size=prev + new)


def check_streams(streams: Sequence[SampleBatch], schedule: SensingSchedule) -> None:
    """Fail at setup if any stream is shorter than its device's final cumulative size."""
    if len(streams) != schedule.num_devices:
        raise ScheduleMismatchError(f"{len(streams)} streams for {schedule.num_devices} scheduled devices")
    final = schedule.cumulative[:, -1] if schedule.num_rounds else schedule.initial_sizes
    for n, (s, need) in enumerate(zip(streams, final)):
        if len(s) < need:
            raise ScheduleMismatchError(f"device {n}: schedule needs {need} samples, stream has {len(s)}")
