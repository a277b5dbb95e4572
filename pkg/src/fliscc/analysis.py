"""Convergence analysis over training traces.

Covers the exact gradient-decomposition identity for incrementally sensed
data, empirical envelopes for the smoothness / variance / gradient-bound /
dissimilarity constants, the per-round learning-rate conditions of both
algorithms, and term-by-term evaluation of their average squared gradient
norm bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import SensingSchedule
from .datasets import SampleBatch
from .learning import ModelSpec, local_gradient

ALPHA_SQ_CEILING = 2.0 - 1e-6
G_SAFETY = 1.1
FEASIBILITY_RTOL = 1e-12

FEDAVG_TERMS = ("initialization", "communication_errors", "gradient_variance",
                "sensing_noniid", "sensing_local_updates")
FEDSGD_TERMS = ("initialization", "communication_errors", "sensing_noniid")


class InfeasibleBoundError(ValueError):
    """The bound does not apply: learning-rate condition fails or alpha^2 >= 2."""


# -- gradient decomposition -------------------------------------------------

def _weighted_grad(w, datasets: Sequence[SampleBatch], model: ModelSpec) -> np.ndarray:
    sizes = np.array([len(d) for d in datasets], dtype=np.float64)
    total = sizes.sum()
    g = np.zeros(model.q)
    for size, data in zip(sizes, datasets):
        if size:
            g += (size / total) * local_gradient(w, data, model)
    return g


def lemma1_sides(w, old_data: Sequence[SampleBatch], new_data: Sequence[SampleBatch],
                 model: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the cumulative-vs-split gradient identity, each evaluated by brute force.

    Left: ``sum_n rho_n grad F(w; S_t^n)`` with ``S_t^n = S_{t-1}^n + D_t^n``.
    Right: ``(S_{t-1}/S_t) sum_n rho_bar_n grad F(w; S_{t-1}^n)
    + (D_t/S_t) sum_n rho_tilde_n grad F(w; D_t^n)``. A side whose total
    size is zero is dropped, which leaves the single-dataset identity.
    """
    if len(old_data) != len(new_data):
        raise ValueError("old and new data must cover the same devices")
    merged = []
    for old, new in zip(old_data, new_data):
        parts = [b for b in (old, new) if len(b)]
        merged.append(SampleBatch.concat(parts) if parts else old)
    s_prev = sum(len(b) for b in old_data)
    d_t = sum(len(b) for b in new_data)
    s_t = s_prev + d_t
    if s_t == 0:
        raise ValueError("all datasets are empty")
    lhs = _weighted_grad(w, merged, model)
    rhs = np.zeros(model.q)
    if s_prev:
        rhs += (s_prev / s_t) * _weighted_grad(w, old_data, model)
    if d_t:
        rhs += (d_t / s_t) * _weighted_grad(w, new_data, model)
    return lhs, rhs


def lemma1_residual(w, old_data: Sequence[SampleBatch], new_data: Sequence[SampleBatch],
                    model: ModelSpec) -> float:
    lhs, rhs = lemma1_sides(w, old_data, new_data, model)
    return float(np.linalg.norm(lhs - rhs))


# -- assumption constants -----------------------------------------------------

@dataclass
class Probe:
    """Gradients observed at one global model during round ``round``.

    ``grads[n]`` is device n's full-batch gradient on its round dataset;
    ``grads_alt`` the same at a displaced point ``w_alt``; ``batch_grads[n]``
    stacks sampled mini-batch gradients at ``w``; ``fresh_grad`` is the
    aggregate gradient over the round's newly sensed samples.
    """

    round: int
    weights: np.ndarray
    w: np.ndarray
    grads: np.ndarray
    w_alt: np.ndarray | None = None
    grads_alt: np.ndarray | None = None
    batch_grads: list[np.ndarray] | None = None
    fresh_grad: np.ndarray | None = None


@dataclass
class AssumptionConstants:
    L: float
    sigma_sq: float
    G: np.ndarray
    alpha_sq: float = 1.0
    beta_sq: float = 0.0
    iid: bool = False
    source: str = "provided"

    def __post_init__(self) -> None:
        self.G = np.atleast_1d(np.asarray(self.G, dtype=np.float64))
        if self.L < 0 or self.sigma_sq < 0 or np.any(self.G < 0):
            raise ValueError("L, sigma^2 and G_t must be nonnegative")
        if self.alpha_sq < 1 or self.beta_sq < 0:
            raise ValueError("need alpha^2 >= 1 and beta^2 >= 0")
        if self.iid and (self.alpha_sq != 1 or self.beta_sq != 0):
            raise ValueError("IID constants must have alpha^2 = 1 and beta^2 = 0")

    def G_at(self, t: int) -> float:
        """Gradient bound for round ``t`` (1-based); a scalar G applies to every round."""
        if self.G.size == 1:
            return float(self.G[0])
        return float(self.G[t - 1])


def min_beta_sq(device_sq: np.ndarray, global_sq: np.ndarray, alpha_sq: float) -> float:
    """Smallest beta^2 with ``device_sq <= alpha_sq * global_sq + beta^2`` on every probe.

    Gaps within rounding of the squared norms count as zero.
    """
    gap = np.asarray(device_sq) - alpha_sq * np.asarray(global_sq)
    gap = np.where(np.abs(gap) <= 1e-12 * (1.0 + np.abs(device_sq)), 0.0, gap)
    return max(0.0, float(np.max(gap)))


def estimate_constants(probes: Sequence[Probe], iid: bool = False, num_rounds: int | None = None,
                       safety: float = G_SAFETY) -> AssumptionConstants:
    """Empirical envelopes of the assumption constants over a set of probes.

    Smoothness is the largest gradient-difference ratio over the displaced
    pairs (aggregate and per device). The variance bound is the largest mean
    squared deviation of mini-batch from full-batch gradients. ``G_t`` is the
    largest squared aggregate gradient seen in round t times ``safety``.
    Dissimilarity takes the least alpha^2 (1) and then the least beta^2 that
    covers every probe.
    """
    probes = list(probes)
    if len(probes) < 2:
        raise ValueError("need at least two probes")

    L = 0.0
    for p in probes:
        if p.w_alt is None or p.grads_alt is None:
            continue
        disp = float(np.linalg.norm(p.w - p.w_alt))
        if disp == 0:
            raise ValueError(f"probe in round {p.round} has zero displacement")
        diff = p.grads - p.grads_alt
        L = max(L, float(np.linalg.norm(p.weights @ diff)) / disp,
                float(np.max(np.linalg.norm(diff, axis=1))) / disp)

    sigma_sq = 0.0
    for p in probes:
        for g_full, g_batch in zip(p.grads, p.batch_grads or []):
            if len(g_batch):
                dev = np.asarray(g_batch) - g_full
                sigma_sq = max(sigma_sq, float(np.mean(np.sum(dev**2, axis=1))))

    T = num_rounds or max(p.round for p in probes)
    per_round = np.full(T, np.nan)
    for p in probes:
        agg = p.weights @ p.grads
        g = float(agg @ agg)
        if p.fresh_grad is not None:
            g = max(g, float(p.fresh_grad @ p.fresh_grad))
        idx = p.round - 1
        if 0 <= idx < T:
            per_round[idx] = g if np.isnan(per_round[idx]) else max(per_round[idx], g)
    fallback = np.nanmax(per_round) if np.any(~np.isnan(per_round)) else 0.0
    G = safety * np.where(np.isnan(per_round), fallback, per_round)

    if iid:
        alpha_sq, beta_sq = 1.0, 0.0
    else:
        device_sq = np.array([p.weights @ np.sum(p.grads**2, axis=1) for p in probes])
        global_sq = np.array([float(np.sum((p.weights @ p.grads) ** 2)) for p in probes])
        alpha_sq = 1.0
        beta_sq = min_beta_sq(device_sq, global_sq, alpha_sq)
    return AssumptionConstants(L, sigma_sq, G, alpha_sq, beta_sq, iid, source="empirical")


# -- learning-rate conditions -------------------------------------------------

def fedavg_lr_feasible(eta: float, L: float, tau: int, S_t: float, S_prev: float) -> bool:
    """``2 L^2 eta^2 tau (tau - 1) <= min(1/5, S_t^2 / (S_t^2 + 4 S_{t-1}^2))``."""
    lhs = 2.0 * L**2 * eta**2 * tau * (tau - 1)
    rhs = min(0.2, S_t**2 / (S_t**2 + 4.0 * S_prev**2))
    return lhs <= rhs * (1 + FEASIBILITY_RTOL)


def fedsgd_lr_feasible(eta: float, L: float, S_t: float, S_prev: float) -> bool:
    """``eta <= min(1/L, S_t / (2 sqrt(2) L S_{t-1}))``."""
    if eta < 0:
        return False
    if L == 0:
        return True
    cap = 1.0 / L
    if S_prev > 0:
        cap = min(cap, S_t / (2.0 * math.sqrt(2.0) * L * S_prev))
    return eta <= cap * (1 + FEASIBILITY_RTOL)


def max_feasible_eta(algorithm: str, L: float, sizes, tau: int = 1) -> float:
    """Largest learning rate meeting the per-round condition for every round.

    ``sizes`` holds the cumulative totals S_0..S_T. Returns ``inf`` when the
    condition never binds (L = 0, or FedAVG with a single local step).
    """
    S = np.asarray(sizes, dtype=np.float64)
    if L == 0 or (algorithm == "fedavg" and tau == 1):
        return math.inf
    caps = []
    for t in range(1, S.size):
        if algorithm == "fedavg":
            rhs = min(0.2, S[t] ** 2 / (S[t] ** 2 + 4.0 * S[t - 1] ** 2))
            caps.append(math.sqrt(rhs / (2.0 * L**2 * tau * (tau - 1))))
        elif algorithm == "fedsgd":
            cap = 1.0 / L
            if S[t - 1] > 0:
                cap = min(cap, S[t] / (2.0 * math.sqrt(2.0) * L * S[t - 1]))
            caps.append(cap)
        else:
            raise ValueError(f"unknown algorithm {algorithm!r}")
    return min(caps) if caps else math.inf


# -- traces and bounds --------------------------------------------------------

@dataclass
class TrainingTrace:
    """Per-round measurements needed by the bounds.

    ``sizes[t]`` is the total cumulative size S_t for t = 0..T and
    ``new[t-1]`` the round-t arrivals D_t; ``device_sizes`` is (T+1) x N.
    ``grad_norm_sq[t-1]`` is ``||grad F(w_{t-1}; S_{t-1})||^2`` (over S_1 when
    S_0 is empty).
    """

    loss: np.ndarray
    grad_norm_sq: np.ndarray
    err_sq_norm: np.ndarray
    sizes: np.ndarray
    new: np.ndarray
    device_sizes: np.ndarray
    weights: np.ndarray
    initial_loss: float = float("nan")

    def __post_init__(self) -> None:
        for name in ("loss", "grad_norm_sq", "err_sq_norm", "sizes", "new"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.device_sizes = np.asarray(self.device_sizes, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        T = self.loss.size
        if not (self.grad_norm_sq.size == self.err_sq_norm.size == self.new.size == T):
            raise ValueError("per-round arrays must all have length T")
        if self.sizes.size != T + 1:
            raise ValueError("sizes must hold S_0..S_T")
        if T and not np.array_equal(self.sizes[1:], self.sizes[:-1] + self.new):
            raise ValueError("sizes violate S_t = S_{t-1} + D_t")

    def __len__(self) -> int:
        return self.loss.size

    @property
    def avg_grad_norm_sq(self) -> float:
        return float(np.mean(self.grad_norm_sq))

    @classmethod
    def from_schedule(cls, schedule: SensingSchedule, loss, grad_norm_sq, err_sq_norm,
                      initial_loss: float = float("nan")) -> "TrainingTrace":
        dev = np.concatenate([schedule.initial_sizes[None, :], schedule.cumulative.T], axis=0)
        totals = dev.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            weights = dev[1:] / totals[1:, None]
        return cls(loss, grad_norm_sq, err_sq_norm, totals, schedule.new_counts.sum(axis=0),
                   dev, weights, initial_loss)


@dataclass
class BoundReport:
    algorithm: str
    feasible: bool
    terms: dict[str, float] = field(default_factory=dict)
    total: float | None = None
    measured: float | None = None
    constants_source: str = "provided"
    f_star_source: str = "provided"
    reason: str = ""

    def require(self) -> "BoundReport":
        if not self.feasible:
            raise InfeasibleBoundError(self.reason)
        return self

    @property
    def holds(self) -> bool | None:
        if not self.feasible or self.measured is None:
            return None
        return self.measured <= self.total

    def rows(self) -> list[tuple[str, float]]:
        rows = list(self.terms.items())
        if self.total is not None:
            rows.append(("total", self.total))
        if self.measured is not None:
            rows.append(("measured_avg_grad_norm_sq", self.measured))
        return rows

    def to_text(self) -> str:
        lines = [f"algorithm: {self.algorithm}",
                 f"constants: {self.constants_source}",
                 f"F*: {self.f_star_source}",
                 f"feasible: {self.feasible}"]
        if not self.feasible:
            lines.append(f"reason: {self.reason}")
        for name, value in self.terms.items():
            lines.append(f"  {name:<24s} {value:.10g}")
        if self.total is not None:
            lines.append(f"  {'total':<24s} {self.total:.10g}")
        if self.measured is not None:
            lines.append(f"measured avg ||grad F||^2: {self.measured:.10g}")
            lines.append(f"bound holds: {self.holds}")
        return "\n".join(lines) + "\n"


def _size_ratios(trace: TrainingTrace) -> tuple[np.ndarray, np.ndarray]:
    """``S_t^2 / S_{t-1}^2`` and ``D_t^2 / S_{t-1}^2`` for t = 2..T."""
    S, D = trace.sizes, trace.new
    if len(trace) >= 2 and S[1] <= 0:
        raise ValueError("bounds need S_1 > 0")
    prev = S[1:-1]
    return (S[2:] / prev) ** 2, (D[1:] / prev) ** 2


def sensing_noniid_bracket(trace: TrainingTrace, consts: AssumptionConstants) -> float:
    """``(1 + sum S_t^2/S_{t-1}^2) beta^2 + alpha^2 sum (D_t^2/S_{t-1}^2) G_t`` over t = 2..T."""
    s_ratio, d_ratio = _size_ratios(trace)
    G = np.array([consts.G_at(t) for t in range(2, len(trace) + 1)])
    return float((1.0 + s_ratio.sum()) * consts.beta_sq + consts.alpha_sq * np.sum(d_ratio * G))


def local_update_bracket(trace: TrainingTrace) -> float:
    """``5 + sum_{t=2..T} (4 + S_t^2/S_{t-1}^2)``."""
    s_ratio, _ = _size_ratios(trace)
    return float(5.0 + np.sum(4.0 + s_ratio))


def _screen(algorithm: str, trace: TrainingTrace, consts: AssumptionConstants, eta: float,
            tau: int = 1) -> str:
    if len(trace) == 0:
        return "empty trace"
    if consts.alpha_sq >= ALPHA_SQ_CEILING:
        return f"alpha^2 = {consts.alpha_sq:.6g} leaves no room below 2"
    if not eta > 0:
        return "learning rate must be positive"
    if trace.sizes[1] <= 0:
        return "no samples sensed in round 1"
    S = trace.sizes
    for t in range(1, len(trace) + 1):
        ok = (fedavg_lr_feasible(eta, consts.L, tau, S[t], S[t - 1]) if algorithm == "fedavg"
              else fedsgd_lr_feasible(eta, consts.L, S[t], S[t - 1]))
        if not ok:
            return f"learning-rate condition fails in round {t}"
    return ""


def theorem1_bound(trace: TrainingTrace, consts: AssumptionConstants, eta: float, tau: int,
                   f0_minus_fstar: float, rho=None) -> BoundReport:
    """Average squared gradient norm bound for FedAVG with sensing and OTA errors.

    ``rho`` defaults to the final round's aggregation weights.
    """
    reason = _screen("fedavg", trace, consts, eta, tau)
    if reason:
        return BoundReport("fedavg", False, constants_source=consts.source, reason=reason)
    T = len(trace)
    a = 2.0 - consts.alpha_sq
    rho = trace.weights[-1] if rho is None else np.asarray(rho, dtype=np.float64)
    terms = {
        "initialization": 4.0 * f0_minus_fstar / (a * T * eta * tau),
        "communication_errors": 4.0 * float(np.sum(trace.err_sq_norm)) / (a * T * eta**2 * tau**2),
        "gradient_variance": 4.0 * consts.L * eta * consts.sigma_sq * float(np.sum(rho**2)) / a,
        "sensing_noniid": sensing_noniid_bracket(trace, consts) / (a * T),
        "sensing_local_updates": consts.L**2 * eta**2 * consts.sigma_sq * (tau - 1) / (a * T)
        * local_update_bracket(trace),
    }
    return BoundReport("fedavg", True, terms, float(sum(terms.values())), trace.avg_grad_norm_sq,
                       constants_source=consts.source)


def theorem2_bound(trace: TrainingTrace, consts: AssumptionConstants, eta: float,
                   f0_minus_fstar: float) -> BoundReport:
    """Average squared gradient norm bound for FedSGD with sensing and OTA errors."""
    reason = _screen("fedsgd", trace, consts, eta)
    if reason:
        return BoundReport("fedsgd", False, constants_source=consts.source, reason=reason)
    T = len(trace)
    a = 2.0 - consts.alpha_sq
    terms = {
        "initialization": 4.0 * f0_minus_fstar / (a * T * eta),
        "communication_errors": 4.0 * float(np.sum(trace.err_sq_norm)) / (a * T),
        "sensing_noniid": sensing_noniid_bracket(trace, consts) / (a * T),
    }
    return BoundReport("fedsgd", True, terms, float(sum(terms.values())), trace.avg_grad_norm_sq,
                       constants_source=consts.source)


def complexity_proxies(trace: TrainingTrace, consts: AssumptionConstants) -> tuple[float, float, float]:
    """Total error energy M1 and the sensing brackets M2, M3 of the complexity results.

    M2 and M3 average a round-independent bracket over T rounds, so they
    equal the bracket itself.
    """
    m1 = float(np.sum(trace.err_sq_norm))
    if len(trace) == 0:
        return m1, 0.0, 0.0
    return m1, sensing_noniid_bracket(trace, consts), local_update_bracket(trace)


def random_lemma1_instance(rng: np.random.Generator, kind: str, max_devices: int = 5, max_size: int = 20):
    """A random (w, old, new, model) instance with 1..max_size samples per device and side."""
    N = int(rng.integers(1, max_devices + 1))
    d, c = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    if kind == "quadratic":
        model = ModelSpec("quadratic", center=rng.normal(size=d))
    else:
        model = ModelSpec(kind, dim=d, num_classes=c, hidden=int(rng.integers(1, 6)))

    def batch(n):
        return SampleBatch(rng.normal(size=(n, d)), rng.integers(0, c, size=n))

    old = [batch(int(rng.integers(1, max_size + 1))) for _ in range(N)]
    new = [batch(int(rng.integers(1, max_size + 1))) for _ in range(N)]
    return rng.normal(size=model.q), old, new, model


def lemma1_check(trials: int = 1000, seed: int = 0, kinds: Sequence[str] = ("logistic", "quadratic")) -> dict:
    """Evaluate the decomposition identity on random instances.

    Returns the worst residual relative to ``1 + ||lhs||`` and the number of
    instances above ``1e-10``.
    """
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for i in range(trials):
        w, old, new, model = random_lemma1_instance(rng, kinds[i % len(kinds)])
        lhs, rhs = lemma1_sides(w, old, new, model)
        rel = float(np.linalg.norm(lhs - rhs)) / (1.0 + float(np.linalg.norm(lhs)))
        worst = max(worst, rel)
        failures += rel > 1e-10
    return {"trials": trials, "worst_relative_residual": worst, "failures": failures}
