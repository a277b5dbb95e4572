"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
4 infeasible bound request.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .analysis import AssumptionConstants, lemma1_check
from .config import ConfigError, load_config
from .datasets import gaussian_blobs, logistic_teacher, save_matrix
from .harness import (EXIT_CONFIG, EXIT_DIVERGED, EXIT_INFEASIBLE, EXIT_OK, RoundError, emit_bounds,
                      load_result, run_experiment)
from .sensing import ScheduleMismatchError
from .sweep import parse_values, run_sweep

log = logging.getLogger("fliscc")


def _cmd_run(args) -> int:
    cfg, text = load_config(args.config)
    if args.workers:
        cfg = cfg.replace(workers=args.workers)
    out = args.out or cfg.output_dir or "runs/" + Path(args.config).stem
    result = run_experiment(cfg, text, out)
    print(f"{cfg.algorithm}: {len(result.metrics)} rounds, final loss {result.final_loss:.6g}, "
          f"latency {sum(c.total_latency for c in result.costs):.6g} s, "
          f"energy {sum(c.total_energy for c in result.costs):.6g} J -> {out}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg, _ = load_config(args.config)
    values = parse_values(args.axis, args.values)
    algorithms = [a.strip() for a in args.algorithms.split(",")] if args.algorithms else None
    out = args.out or f"sweeps/{Path(args.config).stem}_{args.axis}"
    sweep = run_sweep(cfg, args.axis, values, args.replications, algorithms, out)
    sys.stdout.write(sweep.to_csv())
    return EXIT_OK


def _cmd_bounds(args) -> int:
    result = load_result(args.result_dir)
    consts = None
    if args.L is not None:
        consts = AssumptionConstants(args.L, args.sigma_sq, args.G, args.alpha_sq, args.beta_sq)
    report = emit_bounds(result, args.result_dir, consts, args.f_star)
    sys.stdout.write(report.to_text())
    return EXIT_OK if report.feasible else EXIT_INFEASIBLE


def _cmd_lemma1(args) -> int:
    kinds = tuple(args.kinds.split(","))
    res = lemma1_check(args.trials, args.seed, kinds)
    print(f"trials={res['trials']} worst relative residual={res['worst_relative_residual']:.3e} "
          f"failures={res['failures']}")
    return EXIT_OK if res["failures"] == 0 else 1


GEN_KEYS = {"generator", "rows", "dim", "num_classes", "seed", "output", "label_col", "separation"}


def _cmd_gen_data(args) -> int:
    spec = yaml.safe_load(Path(args.spec).read_text()) or {}
    unknown = set(spec) - GEN_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) in data spec: {', '.join(sorted(unknown))}")
    rng = np.random.default_rng(spec.get("seed", 0))
    kind = spec.get("generator", "blobs")
    n, d, c = int(spec.get("rows", 1000)), int(spec.get("dim", 10)), int(spec.get("num_classes", 10))
    if kind == "blobs":
        batch, _ = gaussian_blobs(n, d, c, rng, float(spec.get("separation", 2.0)))
    elif kind == "logistic":
        batch, _ = logistic_teacher(n, d, c, rng)
    else:
        raise ConfigError(f"unknown generator {kind!r}; choose blobs or logistic")
    name = spec.get("output") or "data.csv"
    out = Path(args.out or name)
    if args.out and (out.is_dir() or args.out.endswith(("/", os.sep))):
        out = out / Path(name).name
    out.parent.mkdir(parents=True, exist_ok=True)
    save_matrix(out, batch, spec.get("label_col"))
    print(f"wrote {n} x {d} {kind} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fliscc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: runs/<config stem>)")
    r.add_argument("--workers", type=int, help="threads for per-device work")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="sweep one axis with seed replication")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=["gamma", "sigma_z", "eta", "tau", "schedule"])
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--replications", type=int, default=5)
    s.add_argument("--algorithms", help="comma-separated, e.g. fedavg,fedsgd (default: config algorithm)")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_sweep)

    b = sub.add_parser("bounds", help="evaluate the convergence bound for a finished run")
    b.add_argument("result_dir")
    b.add_argument("--f-star", type=float, help="optimal loss (default: config, exact, or reference run)")
    b.add_argument("--L", type=float, help="provide constants instead of estimating them")
    b.add_argument("--sigma-sq", type=float, default=0.0)
    b.add_argument("--G", type=float, default=0.0)
    b.add_argument("--alpha-sq", type=float, default=1.0)
    b.add_argument("--beta-sq", type=float, default=0.0)
    b.set_defaults(func=_cmd_bounds)

    c = sub.add_parser("check-lemma1", help="verify the gradient decomposition on random instances")
    c.add_argument("--trials", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--kinds", default="logistic,quadratic")
    c.set_defaults(func=_cmd_lemma1)

    g = sub.add_parser("gen-data", help="write a synthetic pool in the delimited matrix format")
    g.add_argument("spec", help="YAML file: generator, rows, dim, num_classes, seed, output, label_col")
    g.add_argument("--out", help="output file, or a directory for the spec's output name")
    g.set_defaults(func=_cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScheduleMismatchError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RoundError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if exc.diverged else 1


if __name__ == "__main__":
    sys.exit(main())
