"""Acceptance criteria, one test each, at their stated tolerances and time limits.

Every test records a one-line verdict that is printed in the pytest terminal
summary under "acceptance criteria".
"""

import dataclasses
import hashlib
import time

import numpy as np
import pytest

from conftest import record_criterion
from fliscc.analysis import (estimate_constants, lemma1_sides, max_feasible_eta,
                             random_lemma1_instance, theorem1_bound, theorem2_bound)
from fliscc.channel import draw_channel, ota_aggregate, realize
from fliscc.cli import main
from fliscc.config import ExperimentConfig
from fliscc.core import weight_fraction
from fliscc.cost import comm_energy, comm_latency, comp_energy, comp_latency, round_cost
from fliscc.datasets import SampleBatch
from fliscc.harness import compute_bound, run_experiment, run_round, setup
from fliscc.learning import ModelSpec, local_gradient, local_loss
from fliscc.sensing import build_schedule

from oracles import central_difference, relative_errors

SEEDS = range(5)


def finish(number, title, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    record_criterion(number, title, ok, f"{detail}; {elapsed:.2f}s (limit {limit:g}s)")
    assert ok, detail


# -- 1 ------------------------------------------------------------------------

def test_c01_decomposition_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, failures = 0.0, 0
    for i in range(1000):
        w, old, new, model = random_lemma1_instance(rng, ("logistic", "quadratic")[i % 2])
        lhs, rhs = lemma1_sides(w, old, new, model)
        ratio = np.linalg.norm(lhs - rhs) / (1e-10 * (1 + np.linalg.norm(lhs)))
        worst = max(worst, ratio)
        failures += ratio > 1
    finish(1, "gradient decomposition identity", failures == 0,
           f"1000 instances, {failures} failures, worst residual {worst:.2e} x tolerance",
           time.perf_counter() - start, 10)


# -- 2 ------------------------------------------------------------------------

def test_c02_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = {}
    for kind in ("quadratic", "logistic", "mlp"):
        worst[kind] = 0.0
        for _ in range(100):
            d, c = int(rng.integers(1, 5)), int(rng.integers(2, 5))
            model = (ModelSpec("quadratic", center=rng.normal(size=d)) if kind == "quadratic"
                     else ModelSpec(kind, dim=d, num_classes=c, hidden=int(rng.integers(1, 5))))
            data = SampleBatch(rng.normal(size=(10, d)), rng.integers(0, c, size=10))
            w = rng.normal(size=model.q)
            fd = central_difference(lambda v: local_loss(v, data, model), w, 1e-5)
            worst[kind] = max(worst[kind], float(np.max(relative_errors(local_gradient(w, data, model), fd))))
    ok = all(v <= 1e-4 for v in worst.values())
    finish(2, "finite-difference gradients", ok,
           "worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()),
           time.perf_counter() - start, 30)


# -- 3 ------------------------------------------------------------------------

def test_c03_channel_algebra():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst, exact_zero = 0.0, True
    for i in range(1000):
        N, q = int(rng.integers(1, 6)), int(rng.integers(1, 17))
        u = rng.normal(scale=3.0, size=(N, q))
        rho = weight_fraction(rng.integers(1, 100, size=N)).rho
        h = draw_channel(N, rng)
        policy = ("full_inversion", "fixed_lambda")[i % 2]
        chan = realize(h, rng.uniform(0.5, 10, size=N), rng.uniform(0, 2), policy, rng.uniform(0.1, 5))
        z = rng.normal(scale=np.sqrt(chan.sigma_z), size=q)
        res = ota_aggregate(u, rho, chan, noise=z)
        closed = np.zeros(q)
        for n in range(N):
            closed += rho[n] * (h[n] * np.sqrt(chan.p[n]) / np.sqrt(chan.lam) - 1.0) * u[n]
        closed += z / np.sqrt(chan.lam) * rho.sum()
        worst = max(worst, float(np.max(np.abs((res.received - res.ideal) - closed))))
        quiet = ota_aggregate(u, rho, realize(h, 10.0, 0.0), rng)
        exact_zero &= bool(np.all(quiet.error == 0.0))
    finish(3, "over-the-air error closed form", worst <= 1e-12 and exact_zero,
           f"1000 instances, max deviation {worst:.1e}, noiseless full inversion exact zero: {exact_zero}",
           time.perf_counter() - start, 5)


# -- 4 ------------------------------------------------------------------------

def classic_cfg(kind, algorithm):
    return ExperimentConfig().replace(**{
        "algorithm": algorithm, "num_devices": 4, "rounds": 50, "model.kind": kind, "model.dim": 3,
        "model.num_classes": 3, "model.init": "normal", "schedule.total_per_device": 100,
        "train.eta": 0.3, "train.tau": 1, "train.batch_size": 100, "channel.error_free": True,
        "figures": False, "data.test_size": 0,
    })


def test_c04_classic_equivalence():
    start = time.perf_counter()
    worst = 0.0
    for kind in ("quadratic", "logistic"):
        iterates = {}
        for alg in ("fedavg", "fedsgd"):
            cfg = classic_cfg(kind, alg)
            state = setup(cfg)
            shared = state.devices[0].stream
            state.devices = [dataclasses.replace(d, stream=shared) for d in state.devices]
            path = []
            for t in range(1, 51):
                state, _ = run_round(state, cfg, t)
                path.append(state.w.copy())
            iterates[alg] = np.array(path)
        # centralized full-batch gradient descent on the single shared dataset
        sched = state.schedule
        w = setup(classic_cfg(kind, "fedsgd")).w.copy()
        central = []
        for t in range(1, 51):
            data = SampleBatch(shared.features[: sched.sizes_at(t)[0]], shared.labels[: sched.sizes_at(t)[0]])
            w = w - 0.3 * local_gradient(w, data, state.model)
            central.append(w.copy())
        central = np.array(central)
        worst = max(worst, float(np.max(np.abs(iterates["fedavg"] - iterates["fedsgd"]))),
                    float(np.max(np.abs(iterates["fedsgd"] - central))))
    finish(4, "classic federated equivalence", worst <= 1e-10,
           f"50 rounds, quadratic and logistic, max coordinate gap {worst:.1e}",
           time.perf_counter() - start, 10)


# -- 5 ------------------------------------------------------------------------

def random_bound_config(rng, i):
    algorithm = ("fedavg", "fedsgd")[i % 2]
    N, T = int(rng.integers(2, 6)), int(rng.integers(5, 31))
    tau = int(rng.integers(1, 5)) if algorithm == "fedavg" else 1
    strategy = str(rng.choice(["uniform", "front_loaded", "all_at_start"]))
    total = int(rng.integers(T, 4 * T + 1))
    sizes = build_schedule(strategy, total, N, T).totals()
    cap = max_feasible_eta(algorithm, 1.0, sizes, tau)
    eta = float(rng.uniform(0.05, 0.95) * min(cap, 1.0))
    return ExperimentConfig().replace(**{
        "algorithm": algorithm, "num_devices": N, "rounds": T, "seed": int(rng.integers(0, 10_000)),
        "model.kind": "quadratic", "model.dim": int(rng.integers(1, 9)), "model.init": "normal",
        "model.init_scale": float(rng.uniform(0.5, 3.0)), "schedule.strategy": strategy,
        "schedule.total_per_device": total, "train.eta": eta, "train.tau": tau,
        "train.batch_size": int(rng.integers(1, 8)),
        "channel.error_free": bool(rng.random() < 0.3), "channel.sigma_z": float(rng.choice([0.0, 1e-4, 1e-2, 0.1])),
        "analysis.record_probes": True, "figures": False,
    })


def test_c05_bound_validity():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    checked, violations, slack = 0, 0, []
    for i in range(30):
        res = run_experiment(random_bound_config(rng, i))
        rep = compute_bound(res, f_star=0.0)
        if not rep.feasible:
            continue
        checked += 1
        violations += not rep.holds
        slack.append(rep.total / rep.measured)
    finish(5, "convergence bounds hold on feasible runs", checked >= 20 and violations == 0,
           f"{checked} feasible runs, {violations} violations, min bound/measured {min(slack):.2f}",
           time.perf_counter() - start, 120)


# -- 6-8 shared setup ---------------------------------------------------------

def logistic_base(**over):
    base = ExperimentConfig().replace(**{
        "num_devices": 10, "rounds": 60, "model.kind": "logistic", "model.dim": 10, "model.num_classes": 10,
        "schedule.total_per_device": 120, "train.tau": 5, "train.batch_size": 16,
        "channel.error_free": True, "figures": False, "eval_stride": 1000, "data.test_size": 0,
    })
    return base.replace(**over)


def lemma_tuned_eta(cfg):
    """Largest learning rate meeting both algorithms' conditions with a smoothness estimate from probes."""
    pilot = run_experiment(cfg.replace(**{"analysis.record_probes": True, "rounds": 10}))
    L = estimate_constants(pilot.probes, iid=True).L
    sizes = build_schedule(cfg.schedule.strategy, cfg.schedule.total_per_device, cfg.num_devices,
                           cfg.rounds).totals()
    return min(max_feasible_eta("fedavg", L, sizes, cfg.train.tau), max_feasible_eta("fedsgd", L, sizes)), L


def test_c06_iid_rounds_to_target():
    start = time.perf_counter()
    base = logistic_base(rounds=100)
    eta, L = lemma_tuned_eta(base)
    target = 1.45
    rounds = {}
    for alg in ("fedavg", "fedsgd"):
        rounds[alg] = [run_experiment(base.replace(algorithm=alg, seed=s, **{"train.eta": eta})).rounds_to(target)
                       for s in SEEDS]
    a, b = np.median(rounds["fedavg"]), np.median(rounds["fedsgd"])
    finish(6, "FedAVG reaches the target sooner under IID data", np.isfinite(b) and a <= 0.6 * b,
           f"eta {eta:.3f} (L {L:.3f}), target loss {target}: median rounds {a:g} vs {b:g} "
           f"(ratio {a / b:.2f} <= 0.6)", time.perf_counter() - start, 120)


def paired_degradation(base, key, bad, good, algorithm):
    diffs = []
    for s in SEEDS:
        hi = run_experiment(base.replace(algorithm=algorithm, seed=s, **{key: bad})).final_loss
        lo = run_experiment(base.replace(algorithm=algorithm, seed=s, **{key: good})).final_loss
        diffs.append(hi - lo)
    return float(np.median(diffs))


def test_c07_noniid_robustness():
    start = time.perf_counter()
    base = logistic_base(**{"partition.mode": "dirichlet"})
    eta, _ = lemma_tuned_eta(base.replace(**{"partition.mode": "iid"}))
    base = base.replace(**{"train.eta": eta})
    deg = {alg: paired_degradation(base, "partition.gamma", 0.1, 100.0, alg) for alg in ("fedavg", "fedsgd")}
    mid = {alg: np.median([run_experiment(base.replace(algorithm=alg, seed=s, **{"partition.gamma": 1.0}))
                           .final_loss for s in SEEDS]) for alg in ("fedavg", "fedsgd")}
    finish(7, "FedSGD degrades less under label skew", deg["fedavg"] > deg["fedsgd"],
           f"eta {eta:.3f}: loss(gamma=0.1) - loss(gamma=100) median fedavg {deg['fedavg']:.4f} "
           f"vs fedsgd {deg['fedsgd']:.4f} (median loss at gamma=1: {mid['fedavg']:.4f} / {mid['fedsgd']:.4f})",
           time.perf_counter() - start, 300)


def test_c08_noise_robustness():
    start = time.perf_counter()
    tau = 5
    eta = 1.0 / (2 * tau)
    base = logistic_base(**{"channel.error_free": False, "channel.policy": "fixed_lambda", "channel.lam": 1.0,
                            "train.eta": eta, "train.tau": tau})
    deg = {alg: paired_degradation(base, "channel.sigma_z", 10.0, 0.0, alg) for alg in ("fedavg", "fedsgd")}
    mid = {alg: np.median([run_experiment(base.replace(algorithm=alg, seed=s, **{"channel.sigma_z": 1.0}))
                           .final_loss for s in SEEDS]) for alg in ("fedavg", "fedsgd")}
    noisy = run_experiment(base.replace(**{"channel.sigma_z": 1.0, "analysis.record_probes": True}))
    consts = estimate_constants(noisy.probes, num_rounds=len(noisy.trace))
    avg = theorem1_bound(noisy.trace, consts, eta, tau, 1.0)
    sgd = theorem2_bound(noisy.trace, consts, eta, 1.0)
    ratio = avg.terms["communication_errors"] / sgd.terms["communication_errors"]
    identity = abs(ratio - 1.0 / (eta * tau) ** 2) <= 1e-12 * ratio and ratio > 1
    finish(8, "FedSGD degrades less under channel noise", deg["fedavg"] > deg["fedsgd"] and identity,
           f"loss(sigma_z=10) - loss(sigma_z=0) median fedavg {deg['fedavg']:.3f} vs fedsgd {deg['fedsgd']:.3f} "
           f"(median loss at sigma_z=1: {mid['fedavg']:.3f} / {mid['fedsgd']:.3f}); communication-term ratio {ratio:.6g} = 1/(eta tau)^2 "
           f"{1 / (eta * tau) ** 2:.6g}", time.perf_counter() - start, 300)


# -- 9 ------------------------------------------------------------------------

COST_CASES = [
    # (q, L, T_slot, power, cycles, coeff, freq, samples, epochs)
    (14, 14, 1e-3, 10.0, 1e6, 1e-28, 1e9, 60, 1.0),
    (15, 14, 1e-3, 2.0, 1e4, 1e-28, 1e9, 0, 1.0),
    (1, 14, 1e-3, 0.0, 2e4, 2e-28, 2e9, 10, 0.5),
    (100, 10, 2e-3, 5.0, 1e5, 1e-27, 5e8, 1000, 3.0),
    (7850, 14, 1e-3, 10.0, 1e4, 1e-28, 1e9, 6000, 1.0),
    (28, 14, 5e-4, 1.5, 3e4, 5e-29, 1.5e9, 321, 0.25),
    (29, 14, 1e-3, 0.1, 1e3, 1e-28, 3e9, 7, 2.0),
    (1000, 1, 1e-6, 10.0, 1e4, 1e-28, 1e9, 1, 1.0),
    (55, 11, 1e-3, 3.0, 8e3, 3e-28, 8e8, 64, 5 * 32 / 64),
    (13, 14, 1e-2, 4.0, 1e4, 1e-28, 1e9, 600, 5 * 32 / 600),
]


def test_c09_cost_model():
    start = time.perf_counter()
    one_slot = comm_latency(14, 14, 1e-3) == pytest.approx(1e-3, abs=1e-15)
    worst = 0.0
    for q, L, slot, p, xi, coeff, f, S, ep in COST_CASES:
        blocks = -(-q // L)
        t = comm_latency(q, L, slot)
        hand = [(t, blocks * slot), (comm_energy(p, t), p * blocks * slot),
                (comp_latency(xi, S, f, ep), ep * xi * S / f), (comp_energy(xi, coeff, f, S, ep), ep * xi * coeff * f * f * S)]
        rc = round_cost([hand[2][1], hand[2][1] / 2], [hand[3][1], 0.0], t, [hand[1][1], hand[1][1]])
        hand += [(rc.total_latency, hand[2][1] + blocks * slot),
                 (rc.total_energy, hand[3][1] + 2 * p * blocks * slot)]
        worst = max(worst, max(abs(a - b) / max(1.0, abs(b)) for a, b in hand))
    finish(9, "cost model exactness", one_slot and worst <= 1e-12,
           f"14 symbols at 14 per 1 ms slot -> {comm_latency(14, 14, 1e-3) * 1e3:g} ms; "
           f"10 instances, worst deviation {worst:.1e}", time.perf_counter() - start, 1)


# -- 10 -----------------------------------------------------------------------

def test_c10_determinism(tmp_path):
    start = time.perf_counter()
    cfg = tmp_path / "det.yaml"
    cfg.write_text(
        "algorithm: fedavg\nnum_devices: 6\nrounds: 20\nseed: 3\nfigures: false\n"
        "model: {kind: mlp, dim: 5, num_classes: 4, hidden: 6, init: normal}\n"
        "train: {eta: 0.05, tau: 3, batch_size: 8}\nschedule: {strategy: front_loaded, total_per_device: 80}\n"
        "partition: {mode: dirichlet, gamma: 0.5}\nchannel: {policy: fixed_lambda, lam: 1.0, sigma_z: 0.01}\n"
        "data: {test_size: 100}\n")
    digests = []
    for name, extra in (("a", []), ("b", []), ("parallel", ["--workers", "4"])):
        assert main(["run", str(cfg), "--out", str(tmp_path / name), *extra]) == 0
        digests.append(hashlib.sha256((tmp_path / name / "metrics.csv").read_bytes()).hexdigest())
    ok = len(set(digests)) == 1
    finish(10, "reproducible metric files", ok,
           f"repeat and 4-worker runs sha256 {'identical' if ok else 'differ'} ({digests[0][:12]})",
           time.perf_counter() - start, 60)


# -- 11 -----------------------------------------------------------------------

def test_c11_complexity_scaling():
    start = time.perf_counter()
    N, tau = 10, 2
    measured = {}
    for T in (100, 400, 1600):
        eta = float(np.sqrt(N / (tau * T)))
        cfg = ExperimentConfig().replace(**{
            "num_devices": N, "rounds": T, "model.kind": "quadratic", "model.dim": 5, "model.init": "normal",
            "model.init_scale": 2.0, "schedule.total_per_device": T, "train.eta": eta, "train.tau": tau,
            "train.batch_size": 1, "channel.error_free": True, "figures": False,
        })
        measured[T] = run_experiment(cfg).trace.avg_grad_norm_sq
    vals = [measured[T] for T in (100, 400, 1600)]
    ok = vals[0] > vals[1] > vals[2]
    finish(11, "average squared gradient shrinks with T at eta = sqrt(N/(tau T))", ok,
           ", ".join(f"T={T}: {v:.4g}" for T, v in measured.items()), time.perf_counter() - start, 180)
