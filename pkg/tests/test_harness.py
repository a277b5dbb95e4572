import dataclasses
import hashlib
import json
import math

import numpy as np
import pytest

from fliscc.analysis import AssumptionConstants
from fliscc.config import ConfigError, ExperimentConfig
from fliscc.harness import (CSV_COLUMNS, RoundError, compute_bound, emit_bounds, initial_loss,
                            load_result, metrics_csv, run_experiment, run_round, setup)
from fliscc.learning import local_gradient
from fliscc.sensing import ScheduleMismatchError


def quadratic_cfg(**over):
    base = ExperimentConfig().replace(**{
        "model.kind": "quadratic", "model.dim": 4, "num_devices": 2, "rounds": 5,
        "schedule.total_per_device": 10, "train.eta": 0.5, "train.tau": 1, "train.batch_size": 100,
        "channel.error_free": True, "figures": False,
    })
    return base.replace(**over)


def share_stream(state):
    """Give every device the first device's stream, so all local datasets coincide."""
    first = state.devices[0].stream
    state.devices = [dataclasses.replace(d, stream=first) for d in state.devices]
    return state


def test_single_device_fedsgd_quadratic_step():
    cfg = quadratic_cfg(algorithm="fedsgd", num_devices=1, **{"model.init": "normal"})
    state = setup(cfg)
    w0, c = state.w.copy(), state.model.center
    state, _ = run_round(state, cfg, 1)
    assert np.allclose(state.w, w0 - 0.5 * (w0 - c), rtol=0, atol=1e-15)


def test_quadratic_loss_contracts_geometrically():
    cfg = quadratic_cfg(algorithm="fedsgd", rounds=8, **{"model.center": [1.0, -1.0, 2.0, 0.5]})
    res = run_experiment(cfg)
    f0 = res.trace.initial_loss
    expect = f0 * (1 - 0.5) ** (2 * np.arange(1, 9))
    assert np.max(np.abs(res.trace.loss - expect)) <= 1e-10


@pytest.mark.parametrize("kind", ["quadratic", "logistic"])
def test_fedavg_equals_fedsgd_for_single_full_batch_step(kind):
    over = {"model.kind": kind, "model.dim": 3, "model.num_classes": 3, "train.eta": 0.2}
    outs = {}
    for alg in ("fedavg", "fedsgd"):
        cfg = quadratic_cfg(algorithm=alg, **over)
        state = share_stream(setup(cfg))
        state, _ = run_round(state, cfg, 1)
        outs[alg] = state.w
    assert np.max(np.abs(outs["fedavg"] - outs["fedsgd"])) <= 1e-12


def test_noiseless_full_inversion_matches_error_free():
    cfg = quadratic_cfg(algorithm="fedavg", **{"model.kind": "logistic", "model.dim": 3, "train.tau": 3,
                                                "train.batch_size": 2, "train.eta": 0.1})
    a = run_experiment(cfg)
    b = run_experiment(cfg.replace(**{"channel.error_free": False, "channel.sigma_z": 0.0}))
    assert np.max(np.abs(a.trace.loss - b.trace.loss)) <= 1e-12
    assert np.all(b.trace.err_sq_norm == 0.0)


def test_zero_rounds():
    res = run_experiment(quadratic_cfg(rounds=0))
    assert len(res.trace) == 0 and res.metrics == [] and res.costs == []


def test_default_scale_run(tmp_path):
    cfg = ExperimentConfig().replace(rounds=3, figures=False)
    assert (cfg.num_devices, cfg.channel.sigma_z, cfg.channel.p_max, cfg.train.eta,
            cfg.schedule.total_per_device) == (10, 1.0, 10.0, 0.001, 6000)
    res = run_experiment(cfg, output_dir=tmp_path)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.split(",") == list(CSV_COLUMNS)
    assert [m.S_t for m in res.metrics] == [20000, 40000, 60000]


def test_sizes_and_costs_are_consistent(small_cfg):
    res = run_experiment(small_cfg)
    sched = setup(small_cfg).schedule
    assert [m.S_t for m in res.metrics] == sched.totals()[1:].tolist()
    assert [m.D_t for m in res.metrics] == sched.new_counts.sum(axis=0).tolist()
    cum = res.cumulative_latency()
    assert cum[-1] == pytest.approx(sum(c.total_latency for c in res.costs), rel=1e-15)
    for c in res.costs:
        assert c.total_latency == c.max_comp_latency + c.comm_latency
        assert c.total_energy == pytest.approx(np.sum(c.comm_energy + c.comp_energy), rel=1e-15)


def test_config_echo_is_verbatim(tmp_path, small_cfg):
    text = "# hand-written\nrounds: 2\n"
    run_experiment(small_cfg.replace(rounds=2), text, tmp_path)
    assert (tmp_path / "config.yaml").read_text() == text


def test_outputs_written(tmp_path, small_cfg):
    run_experiment(small_cfg.replace(figures=True), output_dir=tmp_path)
    for name in ("config.yaml", "metrics.csv", "trace.npz", "summary.json", "loss.png", "accuracy.png", "cost.png"):
        assert (tmp_path / name).exists(), name
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["rounds_completed"] == 6 and summary["failure"] is None


def test_metrics_are_deterministic(small_cfg):
    a = metrics_csv(run_experiment(small_cfg.replace(**{"channel.error_free": False})))
    b = metrics_csv(run_experiment(small_cfg.replace(**{"channel.error_free": False, "workers": 3})))
    assert hashlib.sha256(a.encode()).hexdigest() == hashlib.sha256(b.encode()).hexdigest()


def test_divergence_flushes_partial_results(tmp_path):
    cfg = quadratic_cfg(**{"model.kind": "logistic", "model.dim": 3, "train.eta": 1e308, "rounds": 4,
                           "train.tau": 3, "train.batch_size": 2})
    with pytest.raises(RoundError) as info:
        run_experiment(cfg, output_dir=tmp_path)
    assert info.value.diverged and info.value.step == "local-train"
    assert "# FAILED" in (tmp_path / "metrics.csv").read_text()


def test_setup_rejects_short_pool(tmp_path):
    from fliscc.datasets import SampleBatch, save_matrix
    path = tmp_path / "pool.csv"
    save_matrix(path, SampleBatch(np.zeros((5, 3)), np.arange(5) % 2))
    cfg = quadratic_cfg(**{"model.kind": "logistic", "model.dim": 3, "data.source": "file",
                           "data.path": str(path)})
    with pytest.raises(ScheduleMismatchError):
        setup(cfg)


def test_initial_loss_uses_first_round_when_empty():
    cfg = quadratic_cfg(**{"model.kind": "logistic", "model.dim": 3})
    state = setup(cfg)
    assert initial_loss(state) == pytest.approx(math.log(cfg.model.num_classes), rel=1e-12)


def test_grad_norm_is_measured_before_the_update():
    cfg = quadratic_cfg(algorithm="fedsgd", **{"model.init": "normal"})
    state = setup(cfg)
    w0, c = state.w.copy(), state.model.center
    _, out = run_round(state, cfg, 1)
    assert out.metrics.grad_norm_sq == pytest.approx(float((w0 - c) @ (w0 - c)), rel=1e-12)


def test_provided_constants_reduce_bound_to_initialization(tmp_path):
    cfg = quadratic_cfg(algorithm="fedavg", **{"model.init": "normal", "schedule.strategy": "all_at_start",
                                               "train.eta": 0.3})
    res = run_experiment(cfg)
    consts = AssumptionConstants(1.0, 0.0, 0.0, 1.0, 0.0)
    rep = emit_bounds(res, tmp_path, consts)
    f0 = res.trace.initial_loss
    assert rep.total == pytest.approx(4 * f0 / (5 * 0.3 * 1), rel=1e-12)
    assert rep.terms["communication_errors"] == 0.0 and rep.terms["sensing_noniid"] == 0.0
    rows = (tmp_path / "bounds.csv").read_text().splitlines()
    assert rows[0] == "term_name,value" and rows[-2].startswith("total,")


def test_fedavg_and_fedsgd_bounds_differ_by_variance_term():
    cfg = quadratic_cfg(algorithm="fedavg", **{"train.eta": 0.2, "schedule.strategy": "uniform"})
    res = run_experiment(cfg)
    consts = AssumptionConstants(1.0, 0.3, 2.0, 1.0, 0.0)
    avg = compute_bound(res, consts)
    sgd = compute_bound(dataclasses.replace(res, config=cfg.replace(algorithm="fedsgd")), consts)
    assert avg.feasible and sgd.feasible
    for name in ("initialization", "communication_errors", "sensing_noniid"):
        assert avg.terms[name] == pytest.approx(sgd.terms[name], rel=1e-12)
    rho = res.trace.weights[-1]
    assert avg.total - sgd.total == pytest.approx(4 * 1.0 * 0.2 * 0.3 * np.sum(rho**2), rel=1e-12)


def test_estimated_bound_needs_probes(small_cfg):
    res = run_experiment(small_cfg)
    with pytest.raises(ConfigError):
        compute_bound(res)


def test_load_result_round_trip(tmp_path, small_cfg):
    cfg = small_cfg.replace(**{"analysis.record_probes": True})
    res = run_experiment(cfg, output_dir=tmp_path)
    back = load_result(tmp_path)
    assert np.array_equal(back.trace.loss, res.trace.loss)
    assert len(back.probes) == len(res.probes)
    for p, q in zip(back.probes, res.probes):
        assert np.array_equal(p.grads, q.grads)
        assert all(np.array_equal(a, b) for a, b in zip(p.batch_grads, q.batch_grads))
    a = compute_bound(res, f_star=0.0)
    b = compute_bound(back, f_star=0.0)
    assert a.feasible == b.feasible and a.terms == b.terms


def test_probe_gradients_match_device_data(small_cfg):
    cfg = small_cfg.replace(**{"analysis.record_probes": True})
    state = setup(cfg)
    state, out = run_round(state, cfg, 1)
    for dev, g in zip(state.devices, out.probe.grads):
        assert np.allclose(g, local_gradient(out.probe.w, dev.data, state.model), rtol=0, atol=1e-15)
