"""Command line entry point.

    dynglm simulate  --config sim.cfg --seed 7 --out runs/a
    dynglm aggregate --config sim.cfg --seed 7 --out runs/avg
    dynglm filter    --model poisson --dynamics dyn.cfg --data obs.csv --out fit.csv
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .expfam import MODEL_NAMES, DomainError, make_model
from .filter import FilteringError, Observation, filter_stream
from .sim import SimConfig, SimulationError, aggregate_runs, emit_csv, load_config, run_simulation, write_metrics
from .statespace import Belief, DynamicsSpec, pack_belief

DYNAMICS_KEYS = {"transition": 1.0, "process_noise": 0.0, "prior_mean": 0.0, "prior_var": 1.0}
SCALAR_MODELS = sorted(set(MODEL_NAMES) - {"product"})


def _config(args) -> SimConfig:
    config = load_config(args.config) if args.config else SimConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _summary(series) -> str:
    if not len(series):
        return "rounds=0"
    return (
        f"rounds={len(series)} error_fraction={series.error_fraction[-1]:.4f} "
        f"regret_rate={series.regret_rate[-1]:.4f} random_regret_rate={series.random_regret_rate[-1]:.4f}"
    )


def cmd_simulate(args) -> int:
    records, series = run_simulation(_config(args))
    emit_csv(series, records, args.out)
    print(_summary(series))
    return 0


def cmd_aggregate(args) -> int:
    series = aggregate_runs(_config(args), workers=args.workers)
    write_metrics(series, args.out)
    print(_summary(series))
    return 0


def parse_dynamics(text: str) -> dict:
    """Read the ``key = value`` dynamics file used by ``filter``.

    Keys: ``transition`` (G = g I), ``process_noise`` (W = q I),
    ``prior_mean`` and ``prior_var`` (m0 = m 1, C0 = v I).
    """
    values = dict(DYNAMICS_KEYS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep:
            raise ValueError(f"dynamics line {lineno}: expected key=value")
        if key not in DYNAMICS_KEYS:
            raise ValueError(f"dynamics line {lineno}: unknown key {key!r}")
        values[key] = float(value)
    return values


def _read_observations(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "y" or len(header) < 2:
            raise ValueError(f"{path}: header must be y,x0,x1,...")
        rows = [[float(v) for v in row] for row in reader if row]
    return [Observation(np.array(r[1:]), np.array([r[0]])) for r in rows], len(header) - 1


def cmd_filter(args) -> int:
    model = make_model(args.model, args.noise_var) if args.model == "gaussian" else make_model(args.model)
    dyn = parse_dynamics(Path(args.dynamics).read_text())
    observations, k = _read_observations(args.data)
    spec = DynamicsSpec(dyn["transition"] * np.eye(k), dyn["process_noise"] * np.eye(k))
    belief = Belief(np.full(k, dyn["prior_mean"]), dyn["prior_var"] * np.eye(k))
    header = ["step", "y", "predicted_signal", "stabilized"]
    header += [f"mean_{i}" for i in range(k)] + [f"var_{i}" for i in range(k)]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for obs, (belief, diag) in zip(observations, filter_stream(belief, observations, spec, model)):
            row = [belief.step, repr(float(obs.response[0])), repr(float(diag.predicted_signal[0])), int(diag.stabilized)]
            row += [repr(float(v)) for v in belief.mean] + [repr(float(v)) for v in np.diag(belief.cov)]
            w.writerow(row)
    if args.checkpoint:
        Path(args.checkpoint).write_bytes(pack_belief(belief))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynglm", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, help_ in (
        ("simulate", cmd_simulate, "run one bandit simulation and write per-round and metric CSVs"),
        ("aggregate", cmd_aggregate, "average metric series over the configured repetitions"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value config file; defaults apply when omitted")
        p.add_argument("--seed", type=int, help="master seed, overrides the config")
        p.add_argument("--out", required=True, help="output prefix; .rounds.csv/.metrics.csv are appended")
        if name == "aggregate":
            p.add_argument("--workers", type=int, default=1, help="worker processes for repetitions")
        p.set_defaults(func=func)

    p = sub.add_parser("filter", help="filter a CSV stream of scalar observations")
    p.add_argument("--model", required=True, choices=SCALAR_MODELS)
    p.add_argument("--noise-var", type=float, default=1.0, help="observation variance for --model gaussian")
    p.add_argument("--dynamics", required=True, help="key=value file: transition, process_noise, prior_mean, prior_var")
    p.add_argument("--data", required=True, help="CSV with header y,x0,x1,...")
    p.add_argument("--out", required=True, help="CSV of posterior means and variances per step")
    p.add_argument("--checkpoint", help="write the final belief here in packed binary form")
    p.set_defaults(func=cmd_filter)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, DomainError, FilteringError, SimulationError, OSError) as exc:
        print(f"dynglm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
