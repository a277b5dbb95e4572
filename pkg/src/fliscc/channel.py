"""Over-the-air analog aggregation: fading, power control, denoising and the error vector.

Each parameter element rides one real analog symbol after phase
compensation. The server receives, per element,

    received = sum_n rho_n * (h_n * sqrt(p_n) * u_n + z) / sqrt(lam)

with a single receiver-noise draw ``z ~ N(0, sigma_z)`` per element. Because
the weights sum to one this equals the closed form

    error = sum_n rho_n * (h_n sqrt(p_n) / sqrt(lam) - 1) * u_n + z / sqrt(lam).

Summing ``z`` once per device instead (N * z) would contradict that closed
form, so noise enters once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import as_param_vector, weighted_sum

POLICIES = ("full_inversion", "fixed_lambda")


@dataclass(frozen=True)
class ChannelRealization:
    """Fading magnitudes, transmit powers, denoising factor and noise variance of one round.

    ``gain`` is the per-device alignment ``h sqrt(p) / sqrt(lam)``; power
    control that aligns analytically stores exact ones here.
    """

    h: np.ndarray
    p: np.ndarray
    lam: float
    sigma_z: float
    gain: np.ndarray | None = None

    def __post_init__(self) -> None:
        h = np.asarray(self.h, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.float64)
        if h.shape != p.shape or h.ndim != 1:
            raise ValueError("h and p must be vectors of equal length")
        if np.any(h <= 0):
            raise ValueError("fading magnitudes must be positive")
        if np.any(p < 0):
            raise ValueError("transmit powers must be nonnegative")
        if not self.lam > 0:
            raise ValueError("denoising factor must be positive")
        if self.sigma_z < 0:
            raise ValueError("noise variance must be nonnegative")
        gain = h * np.sqrt(p) / np.sqrt(self.lam) if self.gain is None else np.asarray(self.gain, dtype=np.float64)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "gain", gain)


@dataclass(frozen=True)
class AggregationResult:
    received: np.ndarray
    ideal: np.ndarray
    error: np.ndarray
    error_sq_norm: float
    misalignment: np.ndarray
    noise: np.ndarray


def draw_channel(N: int, rng: np.random.Generator) -> np.ndarray:
    """Rayleigh magnitudes ``|g|`` with ``g ~ CN(0, 1)``."""
    if N < 1:
        raise ValueError("need at least one device")
    g = (rng.normal(size=N) + 1j * rng.normal(size=N)) / np.sqrt(2.0)
    h = np.abs(g)
    # |g| == 0 has probability zero but would break power inversion
    return np.maximum(h, np.finfo(np.float64).tiny)


def power_control(h, p_max, policy: str = "full_inversion", lam: float | None = None):
    """Choose transmit powers and the denoising factor.

    ``full_inversion``: ``lam = min_n h_n^2 P_max^n`` and ``p_n = lam / h_n^2``,
    so every device arrives with unit gain. ``fixed_lambda``: the given
    ``lam`` with ``p_n = min(lam / h_n^2, P_max^n)``; clipped devices arrive
    attenuated.

    Returns ``(p, lam, gain)``.
    """
    h = np.asarray(h, dtype=np.float64)
    p_max = np.broadcast_to(np.asarray(p_max, dtype=np.float64), h.shape)
    if np.any(h <= 0):
        raise ValueError("power control needs strictly positive fading magnitudes")
    if policy == "full_inversion":
        lam = float(np.min(h**2 * p_max))
        p = np.minimum(lam / h**2, p_max)
        gain = np.ones_like(h)
    elif policy == "fixed_lambda":
        if lam is None or not lam > 0:
            raise ValueError("fixed_lambda needs a positive lambda")
        p = np.minimum(lam / h**2, p_max)
        gain = h * np.sqrt(p) / np.sqrt(lam)
    else:
        raise ValueError(f"unknown power policy {policy!r}; choose from {POLICIES}")
    return p, float(lam), gain


def realize(h, p_max, sigma_z: float, policy: str = "full_inversion", lam: float | None = None) -> ChannelRealization:
    p, lam, gain = power_control(h, p_max, policy, lam)
    return ChannelRealization(h, p, lam, sigma_z, gain)


def ota_aggregate(u: Sequence[np.ndarray], weights, chan: ChannelRealization,
                  rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> AggregationResult:
    """Superpose the device vectors over the channel and measure the distortion.

    ``noise`` overrides the receiver-noise draw (tests pin it); otherwise one
    ``N(0, sigma_z)`` value per element is drawn from ``rng``.
    """
    rho = np.asarray(weights, dtype=np.float64)
    U = np.asarray(u, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] != rho.size or rho.size != chan.h.size:
        raise ValueError(f"{U.shape[0] if U.ndim == 2 else '?'} vectors, {rho.size} weights, {chan.h.size} channels")
    q = U.shape[1]
    if noise is None:
        if chan.sigma_z == 0:
            z = np.zeros(q)
        else:
            if rng is None:
                raise ValueError("noisy channel needs an rng")
            z = rng.normal(scale=np.sqrt(chan.sigma_z), size=q)
    else:
        z = np.asarray(noise, dtype=np.float64)
        if z.shape != (q,):
            raise ValueError("noise vector has the wrong length")
    root_lam = np.sqrt(chan.lam)
    gain = chan.gain
    # sum_n rho_n (g_n u_n + z) / sqrt(lam), split so unit gains reproduce the ideal sum bit-for-bit
    received = rho @ (gain[:, None] * U) + rho.sum() * (z / root_lam)
    ideal = weighted_sum(U, rho)
    error = received - ideal
    misalignment = (rho * (gain - 1.0)) @ U
    noise_part = rho.sum() * z / root_lam
    as_param_vector(received, "received aggregate")
    return AggregationResult(received, ideal, error, float(error @ error), misalignment, noise_part)
