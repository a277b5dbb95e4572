"""Shared value types and aggregation-weight arithmetic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

WEIGHT_TOL = 1e-12


class EmptyPopulationError(ValueError):
    """Raised when aggregation weights are requested over zero samples."""


class NonFiniteError(FloatingPointError):
    """Raised when a parameter vector acquires NaN or Inf entries."""


def as_param_vector(values, name: str = "vector") -> np.ndarray:
    """Return ``values`` as a 1-D float64 array, rejecting non-finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class AggregationWeights:
    """Per-device aggregation fractions.

    ``variant`` records which sizes produced them: ``"current"`` (S_t),
    ``"cumulative"`` (S_{t-1}) or ``"fresh"`` (D_t).
    """

    rho: np.ndarray
    variant: str = "current"

    def __post_init__(self) -> None:
        rho = np.asarray(self.rho, dtype=np.float64)
        if rho.ndim != 1 or rho.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(rho < 0) or np.any(rho > 1):
            raise ValueError("weights must lie in [0, 1]")
        if abs(rho.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {rho.sum()!r}, expected 1")
        object.__setattr__(self, "rho", rho)

    def __len__(self) -> int:
        return self.rho.size

    def __array__(self, dtype=None, copy=None):
        return self.rho if dtype is None else self.rho.astype(dtype)


def weight_fraction(sizes: Sequence[int], variant: str = "current") -> AggregationWeights:
    """Normalise dataset sizes into aggregation weights ``sizes[n] / sum(sizes)``."""
    s = np.asarray(sizes)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("sizes must be a non-empty vector")
    if np.any(s < 0):
        raise ValueError("sizes must be nonnegative")
    total = s.sum()
    if total <= 0:
        raise EmptyPopulationError("cannot form weights over an empty population")
    rho = s.astype(np.float64) / float(total)
    return AggregationWeights(rho, variant)


def weighted_sum(vectors: Sequence[np.ndarray], weights) -> np.ndarray:
    """Return ``sum_n rho[n] * vectors[n]``."""
    rho = np.asarray(weights, dtype=np.float64)
    if len(vectors) != rho.size:
        raise ValueError(f"{len(vectors)} vectors but {rho.size} weights")
    stacked = np.asarray(vectors, dtype=np.float64)
    if stacked.ndim != 2:
        raise ValueError("vectors must all share one length")
    return as_param_vector(rho @ stacked, "weighted sum")


@dataclass
class SensingSchedule:
    """New-sample counts ``new_counts[n, t]`` and the derived cumulative sizes.

    Column ``t`` corresponds to round ``t + 1``.
    """

    new_counts: np.ndarray
    initial_sizes: np.ndarray | None = None
    cumulative: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        d = np.asarray(self.new_counts)
        if d.ndim != 2:
            raise ValueError("new_counts must be an N x T matrix")
        if np.any(d < 0) or np.any(d != np.round(d)):
            raise ValueError("new_counts must be nonnegative integers")
        d = d.astype(np.int64)
        s0 = np.zeros(d.shape[0], dtype=np.int64) if self.initial_sizes is None else np.asarray(self.initial_sizes, dtype=np.int64)
        if s0.shape != (d.shape[0],) or np.any(s0 < 0):
            raise ValueError("initial_sizes must be a nonnegative length-N vector")
        self.new_counts = d
        self.initial_sizes = s0
        self.cumulative = s0[:, None] + np.cumsum(d, axis=1)

    @property
    def num_devices(self) -> int:
        return self.new_counts.shape[0]

    @property
    def num_rounds(self) -> int:
        return self.new_counts.shape[1]

    def sizes_at(self, t: int) -> np.ndarray:
        """Per-device cumulative sizes after round ``t`` (``t = 0`` gives S_0)."""
        if t == 0:
            return self.initial_sizes.copy()
        return self.cumulative[:, t - 1].copy()

    def new_at(self, t: int) -> np.ndarray:
        """Per-device new-sample counts of round ``t >= 1``."""
        return self.new_counts[:, t - 1].copy()

    def totals(self) -> np.ndarray:
        """Total cumulative size S_t for t = 0..T."""
        return np.concatenate([[self.initial_sizes.sum()], self.cumulative.sum(axis=0)])


@dataclass
class RoundMetrics:
    round: int
    loss: float
    grad_norm_sq: float
    err_sq_norm: float
    test_loss: float
    test_acc: float
    S_t: int
    D_t: int
    device_sizes: np.ndarray
    weights: np.ndarray
