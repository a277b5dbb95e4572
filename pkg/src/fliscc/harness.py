"""Experiment orchestration: the four-step round loop, outputs, sweeps and bound reports."""

from __future__ import annotations

import csv
import functools
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as streams
from .analysis import (AssumptionConstants, BoundReport, Probe, TrainingTrace, estimate_constants,
                       theorem1_bound, theorem2_bound)
from .channel import draw_channel, ota_aggregate, realize
from .config import ConfigError, ExperimentConfig, dump_config
from .core import NonFiniteError, RoundMetrics, SensingSchedule, weight_fraction, weighted_sum
from .cost import (RoundCost, comm_energy, comm_latency, comp_energy, comp_latency, fedavg_epochs,
                   round_cost)
from .datasets import SampleBatch, gaussian_blobs, load_matrix, logistic_teacher
from .learning import (LocalUpdateConfig, ModelSpec, accuracy, fedavg_global_update,
                       fedavg_local_update, fedsgd_global_update, local_gradient, local_loss)
from .sensing import (DeviceState, PartitionSpec, ScheduleMismatchError, build_schedule, check_streams,
                      partition_assign, sense)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "loss", "grad_norm_sq", "err_sq_norm", "test_loss", "test_acc", "S_t", "D_t",
               "comm_latency_s", "comp_latency_s", "total_latency_s", "comm_energy_j", "comp_energy_j",
               "total_energy_j")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INFEASIBLE = 4


class RoundError(RuntimeError):
    """A module failed inside a round; carries the round index and step name."""

    def __init__(self, round_: int, step: str, cause: Exception):
        super().__init__(f"round {round_}, step '{step}': {cause}")
        self.round = round_
        self.step = step
        self.cause = cause

    @property
    def diverged(self) -> bool:
        return isinstance(self.cause, NonFiniteError)


@dataclass
class ExperimentState:
    t: int
    w: np.ndarray
    devices: list[DeviceState]
    schedule: SensingSchedule
    model: ModelSpec
    test: SampleBatch | None = None


@dataclass
class RoundOutput:
    metrics: RoundMetrics
    cost: RoundCost
    probe: Probe | None = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    config_text: str
    trace: TrainingTrace
    metrics: list[RoundMetrics]
    costs: list[RoundCost]
    probes: list[Probe] = field(default_factory=list)
    wall_clock: float = 0.0
    failure: str | None = None

    @property
    def final_loss(self) -> float:
        return float(self.trace.loss[-1]) if len(self.trace) else float(self.trace.initial_loss)

    def rounds_to(self, target: float) -> float:
        hits = np.flatnonzero(self.trace.loss <= target)
        return float(hits[0] + 1) if hits.size else math.inf

    def cumulative_latency(self) -> np.ndarray:
        return np.cumsum([c.total_latency for c in self.costs])

    def cumulative_energy(self) -> np.ndarray:
        return np.cumsum([c.total_energy for c in self.costs])


# -- setup ----------------------------------------------------------------------

def make_schedule(cfg: ExperimentConfig) -> SensingSchedule:
    s = cfg.schedule
    init = np.full(cfg.num_devices, s.initial_per_device, dtype=np.int64)
    return build_schedule(s.strategy, s.total_per_device, cfg.num_devices, cfg.rounds,
                          matrix=s.matrix, initial_sizes=init)


def make_model(cfg: ExperimentConfig) -> ModelSpec:
    m = cfg.model
    if m.kind == "quadratic":
        if m.center is not None:
            center = np.asarray(m.center, dtype=np.float64)
        else:
            center = streams.stream(cfg.seed, streams.INIT, round_=1).normal(scale=m.center_scale, size=m.dim)
        return ModelSpec("quadratic", center=center)
    return ModelSpec(m.kind, dim=m.dim, num_classes=m.num_classes, hidden=m.hidden)


def _pools(cfg: ExperimentConfig, needed: int) -> tuple[SampleBatch, SampleBatch | None]:
    d = cfg.data
    rng = streams.stream(cfg.seed, streams.DATA)
    n_pool = max(int(math.ceil(needed * d.pool_factor)), cfg.num_devices)
    dim = cfg.model.dim
    classes = cfg.model.num_classes
    if d.source == "file":
        pool = load_matrix(d.path)
        test = load_matrix(d.test_path) if d.test_path else None
        return pool, test
    if d.source == "blobs":
        pool, centers = gaussian_blobs(n_pool, dim, classes, rng, d.separation)
        test = gaussian_blobs(d.test_size, dim, classes, rng, centers=centers)[0] if d.test_size else None
    else:
        pool, teacher = logistic_teacher(n_pool, dim, classes, rng)
        test = logistic_teacher(d.test_size, dim, classes, rng, teacher=teacher)[0] if d.test_size else None
    return pool, test


def setup(cfg: ExperimentConfig) -> ExperimentState:
    """Build schedule, data pool, partition, devices and the initial global model.

    Every mismatch between pool and schedule is reported here, before round 1.
    """
    cfg.validate()
    schedule = make_schedule(cfg)
    model = make_model(cfg)
    final = schedule.cumulative[:, -1] if schedule.num_rounds else schedule.initial_sizes
    pool, test = _pools(cfg, int(final.sum()))
    if cfg.model.kind != "quadratic" and pool.dim != cfg.model.dim:
        raise ConfigError(f"pool has {pool.dim} features but model.dim is {cfg.model.dim}")
    if final.sum() > len(pool):
        raise ScheduleMismatchError(f"schedule needs {final.sum()} samples, pool holds {len(pool)}")
    if final.sum() == 0:
        parts = [np.zeros(0, dtype=np.int64)] * cfg.num_devices
    else:
        spec = PartitionSpec(cfg.partition.mode, cfg.partition.gamma, cfg.seed)
        parts = partition_assign(pool, spec, cfg.num_devices, sizes=final)
    device_streams = [pool.take(idx) for idx in parts]
    check_streams(device_streams, schedule)
    k = cfg.cost
    devices = [
        DeviceState(n, device_streams[n], int(schedule.initial_sizes[n]), None,
                    k.cycles_per_sample, k.energy_coeff, k.cpu_freq, cfg.channel.p_max)
        for n in range(cfg.num_devices)
    ]
    init_rng = streams.stream(cfg.seed, streams.INIT)
    w0 = np.zeros(model.q) if cfg.model.init == "zeros" else init_rng.normal(scale=cfg.model.init_scale, size=model.q)
    return ExperimentState(0, w0, devices, schedule, model, test)


# -- one round ------------------------------------------------------------------

def _weighted_loss(w, datasets: Sequence[SampleBatch], model: ModelSpec) -> float:
    sizes = np.array([len(d) for d in datasets], dtype=np.float64)
    total = sizes.sum()
    return float(sum(s / total * local_loss(w, d, model) for s, d in zip(sizes, datasets) if s))


def _weighted_gradient(w, datasets: Sequence[SampleBatch], model: ModelSpec) -> np.ndarray:
    sizes = np.array([len(d) for d in datasets], dtype=np.float64)
    total = sizes.sum()
    g = np.zeros(model.q)
    for s, d in zip(sizes, datasets):
        if s:
            g += (s / total) * local_gradient(w, d, model)
    return g


def global_loss(w, state: ExperimentState, sizes) -> float:
    return _weighted_loss(w, [dev.window(0, s) for dev, s in zip(state.devices, sizes)], state.model)


def _device_work(dev: DeviceState, w_prev, cfg: ExperimentConfig, model: ModelSpec, t: int):
    data = dev.data
    if cfg.algorithm == "fedavg":
        if len(data) == 0:
            return w_prev.copy()
        lcfg = LocalUpdateConfig(cfg.train.eta, cfg.train.tau, cfg.train.batch_size)
        return fedavg_local_update(w_prev, data, lcfg, model, streams.stream(cfg.seed, streams.MINIBATCH, dev.id, t))
    if len(data) == 0:
        return np.zeros(model.q)
    return local_gradient(w_prev, data, model)


def _probe(state: ExperimentState, devices: list[DeviceState], w_prev, weights, sizes_prev, cfg, t) -> Probe:
    model = state.model
    a = cfg.analysis
    rng = streams.stream(cfg.seed, streams.PROBE, round_=t)
    direction = rng.normal(size=model.q)
    w_alt = w_prev + a.probe_displacement * direction / np.linalg.norm(direction)
    grads, grads_alt, batch_grads = [], [], []
    fresh = []
    for dev, s_prev in zip(devices, sizes_prev):
        data = dev.data
        if len(data) == 0:
            grads.append(np.zeros(model.q))
            grads_alt.append(np.zeros(model.q))
            batch_grads.append(np.zeros((0, model.q)))
            fresh.append(SampleBatch.empty(data.dim))
            continue
        grads.append(local_gradient(w_prev, data, model))
        grads_alt.append(local_gradient(w_alt, data, model))
        b = min(cfg.train.batch_size, len(data))
        brng = streams.stream(cfg.seed, streams.PROBE, dev.id, t)
        batch_grads.append(np.array([
            local_gradient(w_prev, data.take(brng.choice(len(data), size=b, replace=False)), model)
            for _ in range(a.probe_batches)
        ]).reshape(-1, model.q))
        fresh.append(dev.window(int(s_prev), dev.size))
    fresh_grad = _weighted_gradient(w_prev, fresh, model) if sum(len(f) for f in fresh) else None
    return Probe(t, np.asarray(weights), w_prev.copy(), np.array(grads), w_alt, np.array(grads_alt),
                 batch_grads, fresh_grad)


def run_round(state: ExperimentState, cfg: ExperimentConfig, t: int,
              pool: ThreadPoolExecutor | None = None) -> tuple[ExperimentState, RoundOutput]:
    """Broadcast, sense, train locally, aggregate and update the global model for round ``t``."""
    step = "broadcast"
    try:
        if not 1 <= t <= cfg.rounds:
            raise ValueError(f"round {t} outside 1..{cfg.rounds}")
        model, sched = state.model, state.schedule
        w_prev = state.w.copy()

        step = "sense"
        devices = [sense(d, t, sched) for d in state.devices]
        sizes_prev, sizes, new = sched.sizes_at(t - 1), sched.sizes_at(t), sched.new_at(t)
        weights = weight_fraction(sizes).rho

        step = "measure"
        basis = sizes_prev if sizes_prev.sum() > 0 else sizes
        g_prev = _weighted_gradient(w_prev, [d.window(0, s) for d, s in zip(devices, basis)], model)
        grad_norm_sq = float(g_prev @ g_prev)
        probe = _probe(state, devices, w_prev, weights, sizes_prev, cfg, t) if cfg.analysis.record_probes else None

        step = "local-train"
        work = lambda d: _device_work(d, w_prev, cfg, model, t)  # noqa: E731
        uploads = list(pool.map(work, devices)) if pool is not None else [work(d) for d in devices]

        step = "aggregate"
        ch = cfg.channel
        if ch.error_free:
            received = weighted_sum(uploads, weights)
            err_sq = 0.0
            powers = np.full(len(devices), ch.p_max)
        else:
            h = draw_channel(len(devices), streams.stream(cfg.seed, streams.CHANNEL, round_=t))
            chan = realize(h, ch.p_max, ch.sigma_z, ch.policy, ch.lam)
            res = ota_aggregate(uploads, weights, chan, streams.stream(cfg.seed, streams.NOISE, round_=t))
            received, err_sq, powers = res.received, res.error_sq_norm, chan.p

        step = "global-update"
        if cfg.algorithm == "fedavg":
            w = fedavg_global_update(uploads, weights, None) if ch.error_free else received.copy()
        else:
            w = fedsgd_global_update(w_prev, received, cfg.train.eta)
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("global model became non-finite")

        step = "evaluate"
        new_state = ExperimentState(t, w, devices, sched, model, state.test)
        loss = global_loss(w, new_state, sizes)
        test_loss = test_acc = float("nan")
        if t % cfg.eval_stride == 0 or t == cfg.rounds:
            if model.kind == "quadratic":
                test_loss = loss
            elif state.test is not None and len(state.test):
                test_loss = local_loss(w, state.test, model)
                test_acc = accuracy(w, state.test, model)

        step = "cost"
        k = cfg.cost
        t_comm = comm_latency(model.q, k.L, k.T_slot)
        if cfg.algorithm == "fedavg":
            epochs = [fedavg_epochs(cfg.train.tau, cfg.train.batch_size, int(s)) for s in sizes]
        else:
            epochs = [1.0 if s > 0 else 0.0 for s in sizes]
        cost = round_cost(
            [comp_latency(d.cycles_per_sample, int(s), d.cpu_freq, e) for d, s, e in zip(devices, sizes, epochs)],
            [comp_energy(d.cycles_per_sample, d.energy_coeff, d.cpu_freq, int(s), e)
             for d, s, e in zip(devices, sizes, epochs)],
            t_comm,
            [comm_energy(float(p), t_comm) for p in powers],
            downlink_latency_s=t_comm if k.include_downlink else 0.0,
        )
    except RoundError:
        raise
    except Exception as exc:  # noqa: BLE001 - rewrapped with round context
        raise RoundError(t, step, exc) from exc

    metrics = RoundMetrics(t, loss, grad_norm_sq, err_sq, test_loss, test_acc, int(sizes.sum()),
                           int(new.sum()), sizes, weights)
    return new_state, RoundOutput(metrics, cost, probe)


# -- whole experiment -----------------------------------------------------------

def initial_loss(state: ExperimentState) -> float:
    """F(w_0; S_0), falling back to the round-1 data when nothing is held initially."""
    sched = state.schedule
    basis = sched.sizes_at(0)
    if basis.sum() == 0:
        if sched.num_rounds == 0:
            return float("nan")
        basis = sched.sizes_at(1)
        if basis.sum() == 0:
            return float("nan")
    return _weighted_loss(state.w, [d.window(0, s) for d, s in zip(state.devices, basis)], state.model)


def _trace(state: ExperimentState, metrics: list[RoundMetrics], f0: float) -> TrainingTrace:
    sched = state.schedule
    T = len(metrics)
    dev = np.stack([sched.sizes_at(t) for t in range(T + 1)])
    totals = dev.sum(axis=1)
    weights = np.array([m.weights for m in metrics]).reshape(T, sched.num_devices)
    return TrainingTrace(
        loss=[m.loss for m in metrics],
        grad_norm_sq=[m.grad_norm_sq for m in metrics],
        err_sq_norm=[m.err_sq_norm for m in metrics],
        sizes=totals,
        new=[m.D_t for m in metrics],
        device_sizes=dev,
        weights=weights,
        initial_loss=f0,
    )


def _warn_small_batches(cfg: ExperimentConfig, schedule: SensingSchedule) -> None:
    if cfg.algorithm != "fedavg" or schedule.num_rounds == 0:
        return
    held = schedule.cumulative[schedule.cumulative > 0]
    if held.size and cfg.train.batch_size > held.min():
        _clamp_warning(cfg.train.batch_size, int(held.min()))


@functools.lru_cache(maxsize=None)
def _clamp_warning(batch_size: int, smallest: int) -> None:
    # cached so that sweeps repeating the same setting warn only once per process
    log.warning("batch size %d exceeds the %d samples some devices hold; their mini-batches are "
                "clamped to the local dataset", batch_size, smallest)


def run_experiment(cfg: ExperimentConfig, config_text: str | None = None,
                   output_dir: str | Path | None = None) -> ExperimentResult:
    """Run all rounds; write outputs when ``output_dir`` (or ``cfg.output_dir``) is set.

    A failing round still flushes the partial metrics, marked as failed,
    before the error propagates.
    """
    started = time.perf_counter()
    state = setup(cfg)
    _warn_small_batches(cfg, state.schedule)
    f0 = initial_loss(state)
    text = config_text if config_text is not None else dump_config(cfg)
    out = output_dir if output_dir is not None else cfg.output_dir
    metrics: list[RoundMetrics] = []
    costs: list[RoundCost] = []
    probes: list[Probe] = []
    failure: RoundError | None = None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            state, ro = run_round(state, cfg, t, pool)
            metrics.append(ro.metrics)
            costs.append(ro.cost)
            if ro.probe is not None:
                probes.append(ro.probe)
    except RoundError as exc:
        failure = exc
    finally:
        if pool is not None:
            pool.shutdown()
    result = ExperimentResult(cfg, text, _trace(state, metrics, f0), metrics, costs, probes,
                              time.perf_counter() - started, str(failure) if failure else None)
    if out is not None:
        write_outputs(result, out)
    if failure is not None:
        raise failure
    return result


# -- outputs --------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def metrics_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for m, c in zip(result.metrics, result.costs):
        writer.writerow([_fmt(v) for v in (
            m.round, m.loss, m.grad_norm_sq, m.err_sq_norm, m.test_loss, m.test_acc, m.S_t, m.D_t,
            c.comm_latency, c.max_comp_latency, c.total_latency, float(np.sum(c.comm_energy)),
            float(np.sum(c.comp_energy)), c.total_energy)])
    if result.failure:
        buf.write(f"# FAILED: {result.failure}\n")
    return buf.getvalue()


def _save_trace(result: ExperimentResult, path: Path) -> None:
    tr = result.trace
    arrays = dict(loss=tr.loss, grad_norm_sq=tr.grad_norm_sq, err_sq_norm=tr.err_sq_norm, sizes=tr.sizes,
                  new=tr.new, device_sizes=tr.device_sizes, weights=tr.weights,
                  initial_loss=np.array(tr.initial_loss))
    if result.probes:
        P = result.probes
        N, q = P[0].grads.shape
        K = max((len(b) for p in P for b in (p.batch_grads or [])), default=0)
        batch = np.zeros((len(P), N, K, q))
        counts = np.zeros((len(P), N), dtype=np.int64)
        for i, p in enumerate(P):
            for n, b in enumerate(p.batch_grads or []):
                batch[i, n, :len(b)] = b
                counts[i, n] = len(b)
        arrays.update(
            probe_round=np.array([p.round for p in P]), probe_weights=np.array([p.weights for p in P]),
            probe_w=np.array([p.w for p in P]), probe_grads=np.array([p.grads for p in P]),
            probe_w_alt=np.array([p.w_alt for p in P]), probe_grads_alt=np.array([p.grads_alt for p in P]),
            probe_batch=batch, probe_batch_counts=counts,
            probe_fresh=np.array([p.fresh_grad if p.fresh_grad is not None else np.full(q, np.nan) for p in P]),
        )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_trace(path) -> tuple[TrainingTrace, list[Probe]]:
    with np.load(path) as z:
        tr = TrainingTrace(z["loss"], z["grad_norm_sq"], z["err_sq_norm"], z["sizes"], z["new"],
                           z["device_sizes"], z["weights"], float(z["initial_loss"]))
        probes = []
        if "probe_round" in z:
            for i, t in enumerate(z["probe_round"]):
                counts = z["probe_batch_counts"][i]
                fresh = z["probe_fresh"][i]
                probes.append(Probe(
                    int(t), z["probe_weights"][i], z["probe_w"][i], z["probe_grads"][i], z["probe_w_alt"][i],
                    z["probe_grads_alt"][i], [z["probe_batch"][i, n, :c] for n, c in enumerate(counts)],
                    None if np.any(np.isnan(fresh)) else fresh))
    return tr, probes


def write_outputs(result: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(result.config_text)
    (out / "metrics.csv").write_text(metrics_csv(result))
    _save_trace(result, out / "trace.npz")
    summary = {
        "algorithm": result.config.algorithm,
        "rounds_completed": len(result.metrics),
        "final_loss": result.final_loss,
        "initial_loss": result.trace.initial_loss,
        "total_latency_s": float(sum(c.total_latency for c in result.costs)),
        "total_energy_j": float(sum(c.total_energy for c in result.costs)),
        "failure": result.failure,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if result.config.figures and result.metrics:
        from .plotting import plot_run
        plot_run(result, out)
    return out


# -- bounds ---------------------------------------------------------------------

def reference_optimum(cfg: ExperimentConfig, steps: int | None = None, lr: float | None = None) -> tuple[float, str]:
    """Estimate F* on the final pooled dataset by centralized full-batch gradient descent."""
    state = setup(cfg)
    if state.model.kind == "quadratic":
        return 0.0, "exact (quadratic)"
    steps = cfg.analysis.reference_steps if steps is None else steps
    final = state.schedule.sizes_at(state.schedule.num_rounds)
    data = [d.window(0, s) for d, s in zip(state.devices, final)]
    w = state.w.copy()
    step = lr if lr is not None else max(cfg.train.eta, 0.5)
    best = _weighted_loss(w, data, state.model)
    for _ in range(steps):
        w = w - step * _weighted_gradient(w, data, state.model)
        best = min(best, _weighted_loss(w, data, state.model))
    return best, f"reference gradient descent ({steps} steps)"


def compute_bound(result: ExperimentResult, consts: AssumptionConstants | None = None,
                  f_star: float | None = None) -> BoundReport:
    cfg = result.config
    trace = result.trace
    if consts is None:
        if len(result.probes) < 2:
            raise ConfigError("estimated constants need probes; set analysis.record_probes: true")
        consts = estimate_constants(result.probes, iid=cfg.analysis.iid, num_rounds=len(trace))
    if f_star is not None:
        f_src = "provided"
    elif cfg.analysis.f_star is not None:
        f_star, f_src = cfg.analysis.f_star, "config"
    else:
        f_star, f_src = reference_optimum(cfg)
    gap = max(0.0, trace.initial_loss - f_star)
    if cfg.algorithm == "fedavg":
        report = theorem1_bound(trace, consts, cfg.train.eta, cfg.train.tau, gap)
    else:
        report = theorem2_bound(trace, consts, cfg.train.eta, gap)
    report.f_star_source = f"{f_src}: F* = {f_star:.10g}"
    if report.measured is None:
        report.measured = trace.avg_grad_norm_sq if len(trace) else None
    return report


def emit_bounds(result: ExperimentResult, out_dir, consts: AssumptionConstants | None = None,
                f_star: float | None = None) -> BoundReport:
    """Write ``bounds.txt`` and the per-term ``bounds.csv`` next to a run's outputs."""
    report = compute_bound(result, consts, f_star)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bounds.txt").write_text(report.to_text())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("term_name", "value"))
    for name, value in report.rows():
        writer.writerow((name, repr(float(value))))
    if not report.feasible:
        writer.writerow(("infeasible", report.reason))
    (out / "bounds.csv").write_text(buf.getvalue())
    return report


def load_result(result_dir) -> ExperimentResult:
    """Rebuild an :class:`ExperimentResult` (trace, probes, config) from an output directory."""
    from .config import load_config
    d = Path(result_dir)
    cfg, text = load_config(d / "config.yaml")
    trace, probes = load_trace(d / "trace.npz")
    return ExperimentResult(cfg, text, trace, [], [], probes)
