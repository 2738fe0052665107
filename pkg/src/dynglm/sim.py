"""Contextual bandit simulation with drifting parameters.

Each round: the true parameters take a random-walk step, fresh contexts are
drawn, Thompson sampling picks an arm from the filter's prior, the played
arm's three-entry response is drawn (logistic, Gaussian, logistic) and the
filter is updated with it. The reward is the first response entry.

Randomness comes from numpy's PCG64 generator. A master seed is expanded
with :class:`numpy.random.SeedSequence`; repetition ``i`` uses the child with
spawn key ``(i,)``, and inside a repetition separate streams drive the true
parameters, the contexts, the responses and the policy.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from .bandit import (
    THOMPSON_VARIANTS,
    ContextFactors,
    CoordinateReward,
    RoundRecord,
    arm_regrets,
    argmax_arm,
    build_context,
    context_dim,
    psd_factor,
    thompson_select,
)
from .expfam import BernoulliLogit, Gaussian, Product
from .filter import FilteringError, Observation, update
from .statespace import Belief, DynamicsSpec, predict

__all__ = [
    "SimConfig",
    "MetricSeries",
    "SimulationError",
    "parse_config",
    "load_config",
    "simulation_model",
    "repetition_seed",
    "correlated_cov",
    "drift_step",
    "metrics_from_records",
    "run_simulation",
    "aggregate_runs",
    "emit_csv",
    "write_rounds",
    "write_metrics",
    "read_rounds",
    "read_metrics",
]

ROUNDS_HEADER = ["round", "chosen_arm", "optimal_arm", "reward", "regret", "random_regret"]
METRICS_HEADER = ["round", "error_fraction", "regret_rate", "random_regret_rate"]
RESPONSE_COLUMNS = 3


class SimulationError(RuntimeError):
    """A run failed; carries the repetition and round where it happened."""

    def __init__(self, message, *, round=None, repetition=None, diagnostics=None):
        super().__init__(message)
        self.round = round
        self.repetition = repetition
        self.diagnostics = diagnostics


def _min_equicorrelation_eig(n: int, rho: float) -> float:
    if n <= 1:
        return 1.0
    return min(1.0 - rho, 1.0 + (n - 1) * rho)


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings. Field names double as config-file keys."""

    num_arms: int = 10
    rounds: int = 2000
    repetitions: int = 30
    k1: int = 5
    k2: int = 3
    drift_rate: float = 1e5
    drift_corr: float = 0.2
    cont_corr: float = -0.1
    sigma_y2: float = 1.0
    seed: int = 0
    thompson_variant: str = "per_arm"

    def __post_init__(self):
        if self.num_arms < 1:
            raise ValueError("num_arms must be positive")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.repetitions < 1:
            raise ValueError("repetitions must be positive")
        if self.k1 < 0 or self.k2 < 0:
            raise ValueError("k1 and k2 must be non-negative")
        if not self.drift_rate > 0:
            raise ValueError("drift_rate must be positive")
        if not self.sigma_y2 > 0:
            raise ValueError("sigma_y2 must be positive")
        for name in ("drift_corr", "cont_corr"):
            if not -1 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (-1, 1)")
        if _min_equicorrelation_eig(self.num_params, self.drift_corr) < 0:
            raise ValueError(f"drift_corr={self.drift_corr} is not a valid correlation for {self.num_params} parameters")
        if _min_equicorrelation_eig(self.k1, self.cont_corr) < 0:
            raise ValueError(f"cont_corr={self.cont_corr} is not a valid correlation for k1={self.k1}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.thompson_variant not in THOMPSON_VARIANTS:
            raise ValueError(f"thompson_variant must be one of {THOMPSON_VARIANTS}")

    @property
    def num_params(self) -> int:
        return context_dim(self.num_arms, self.k1, self.k2)

    def replace(self, **changes) -> "SimConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return SimConfig(**values)


def parse_config(text: str) -> SimConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    types = {f.name: f.type for f in fields(SimConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        kind = types[key]
        try:
            if kind == "int":
                values[key] = int(value)
            elif kind == "float":
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise ValueError(f"line {lineno}: bad value {value!r} for {key}") from None
    return SimConfig(**values)


def load_config(path) -> SimConfig:
    return parse_config(Path(path).read_text())


@dataclass(frozen=True)
class MetricSeries:
    """Cumulative per-round metrics; entry ``t-1`` covers rounds 1..t."""

    error_fraction: np.ndarray
    regret_rate: np.ndarray
    random_regret_rate: np.ndarray

    def __len__(self) -> int:
        return len(self.error_fraction)


def simulation_model(sigma_y2: float = 1.0) -> Product:
    return Product([BernoulliLogit(), Gaussian(sigma_y2), BernoulliLogit()])


def repetition_seed(seed: int, repetition: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(repetition,))


def correlated_cov(variances, corr: float) -> np.ndarray:
    """Covariance with the given variances and a common correlation.

    If the result is not PSD its negative eigenvalues are clipped to zero.
    """
    s = np.sqrt(np.asarray(variances, dtype=float))
    cov = corr * np.outer(s, s)
    np.fill_diagonal(cov, s * s)
    w, v = np.linalg.eigh(cov)
    if w.size and w[0] < 0:
        cov = (v * np.clip(w, 0.0, None)) @ v.T
        cov = 0.5 * (cov + cov.T)
    return cov


def drift_step(rng: np.random.Generator, theta, rate: float, corr: np.ndarray, corr_factor: np.ndarray):
    """Advance the true parameters one step; returns ``(theta, W)``.

    ``W`` has i.i.d. exponential(rate) variances and correlation matrix
    ``corr`` (with ``corr_factor @ corr_factor.T == corr``). The step is
    ``sd * (corr_factor @ z)``, which has covariance ``W``.
    """
    sd = np.sqrt(rng.exponential(1.0 / rate, size=corr.shape[0]))
    W = corr * np.outer(sd, sd)
    return theta + sd * (corr_factor @ rng.standard_normal(sd.size)), W


def _equicorrelation(n: int, rho: float) -> np.ndarray:
    return correlated_cov(np.ones(n), rho)


def metrics_from_records(records) -> MetricSeries:
    n = len(records)
    t = np.arange(1, n + 1, dtype=float)
    miss = np.array([r.chosen_arm != r.optimal_arm for r in records], dtype=float)
    reg = np.array([r.regret for r in records], dtype=float)
    rnd = np.array([r.random_regret for r in records], dtype=float)
    return MetricSeries(
        error_fraction=np.cumsum(miss) / t if n else np.zeros(0),
        regret_rate=np.cumsum(reg) / t if n else np.zeros(0),
        random_regret_rate=np.cumsum(rnd) / t if n else np.zeros(0),
    )


def _sample_response(rng: np.random.Generator, lam: np.ndarray, sigma_y2: float) -> np.ndarray:
    u = rng.random(2)
    return np.array(
        [
            float(u[0] < expit(lam[0])),
            rng.normal(lam[1], math.sqrt(sigma_y2)),
            float(u[1] < expit(lam[2])),
        ]
    )


def run_simulation(config: SimConfig, repetition: int = 0) -> tuple[list[RoundRecord], MetricSeries]:
    """Play ``config.rounds`` rounds of the bandit game.

    Parameters
    ----------
    config : SimConfig
    repetition : int, default 0
        Selects the sub-seed; :func:`aggregate_runs` uses 0..repetitions-1.

    Returns
    -------
    records : list of RoundRecord
    series : MetricSeries

    Raises
    ------
    SimulationError
        The filter failed; the round index and diagnostics are attached.
    """
    A, k1, k2 = config.num_arms, config.k1, config.k2
    k = config.num_params
    truth_ss, ctx_ss, resp_ss, policy_ss = repetition_seed(config.seed, repetition).spawn(4)
    truth_rng = np.random.default_rng(truth_ss)
    ctx_rng = np.random.default_rng(ctx_ss)
    resp_rng = np.random.default_rng(resp_ss)
    policy_rng = np.random.default_rng(policy_ss)

    model = simulation_model(config.sigma_y2)
    reward = CoordinateReward(0, RESPONSE_COLUMNS)

    theta = truth_rng.standard_normal(k) * np.sqrt(truth_rng.exponential(1.0, size=k))
    drift_corr = _equicorrelation(k, config.drift_corr)
    drift_factor = psd_factor(drift_corr)

    cont_cov = correlated_cov(ctx_rng.exponential(1.0, size=k1), config.cont_corr)
    cont_factor = psd_factor(cont_cov) if k1 else np.zeros((0, 0))

    belief = Belief(np.zeros(k), np.eye(k))
    records: list[RoundRecord] = []
    for t in range(1, config.rounds + 1):
        theta, W = drift_step(truth_rng, theta, config.drift_rate, drift_corr, drift_factor)
        prior = predict(belief, DynamicsSpec.random_walk(W))

        xc = cont_factor @ ctx_rng.standard_normal((k1, RESPONSE_COLUMNS))
        xd = np.zeros(k2)
        if k2:
            xd[ctx_rng.integers(k2)] = 1.0
        factors = ContextFactors(A, xc, xd, cont_cov)
        contexts = [build_context(factors, a) for a in range(A)]

        chosen = thompson_select(prior, contexts, model, reward, policy_rng, config.thompson_variant)
        regrets = arm_regrets(theta, contexts, model, reward)
        optimal = argmax_arm(-regrets)

        X = contexts[chosen]
        y = _sample_response(resp_rng, X.T @ theta, config.sigma_y2)
        try:
            belief, _ = update(prior, Observation(X, y), model)
        except FilteringError as exc:
            raise SimulationError(
                f"round {t}: {exc}", round=t, repetition=repetition, diagnostics=exc.diagnostics
            ) from exc
        records.append(
            RoundRecord(
                round=t,
                chosen_arm=chosen,
                optimal_arm=optimal,
                reward=reward.extract(y),
                regret=float(regrets[chosen]),
                random_regret=float(regrets.mean()),
            )
        )
    return records, metrics_from_records(records)


def _run_series(args) -> MetricSeries:
    config, rep = args
    try:
        return run_simulation(config, rep)[1]
    except SimulationError as exc:
        raise SimulationError(
            f"repetition {rep}: {exc}", round=exc.round, repetition=rep, diagnostics=exc.diagnostics
        ) from exc


def aggregate_runs(config: SimConfig, workers: int = 1) -> MetricSeries:
    """Pointwise mean of the metric series over ``config.repetitions`` runs.

    Repetitions are independent; with ``workers > 1`` they run in a process
    pool. Results are combined in repetition order either way.
    """
    jobs = [(config, rep) for rep in range(config.repetitions)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_series, jobs))
    else:
        runs = [_run_series(job) for job in jobs]
    return MetricSeries(
        error_fraction=np.mean([r.error_fraction for r in runs], axis=0),
        regret_rate=np.mean([r.regret_rate for r in runs], axis=0),
        random_regret_rate=np.mean([r.random_regret_rate for r in runs], axis=0),
    )


def _fmt(x) -> str:
    # repr of a Python float is the shortest string that round-trips
    return repr(float(x))


def _prefixed(path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.name + suffix)


def write_rounds(records, path) -> Path:
    out = _prefixed(path, ".rounds.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUNDS_HEADER)
        for r in records:
            w.writerow([r.round, r.chosen_arm, r.optimal_arm, _fmt(r.reward), _fmt(r.regret), _fmt(r.random_regret)])
    return out


def write_metrics(series: MetricSeries, path) -> Path:
    out = _prefixed(path, ".metrics.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for i, row in enumerate(zip(series.error_fraction, series.regret_rate, series.random_regret_rate), 1):
            w.writerow([i, *map(_fmt, row)])
    return out


def emit_csv(series: MetricSeries, records, path) -> tuple[Path, Path]:
    """Write ``<path>.rounds.csv`` and ``<path>.metrics.csv``."""
    return write_rounds(records, path), write_metrics(series, path)


def _read(path, header):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise ValueError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def read_rounds(path) -> list[RoundRecord]:
    rows = _read(_prefixed(path, ".rounds.csv"), ROUNDS_HEADER)
    return [
        RoundRecord(int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4]), float(r[5]))
        for r in rows
    ]


def read_metrics(path) -> MetricSeries:
    rows = _read(_prefixed(path, ".metrics.csv"), METRICS_HEADER)
    cols = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(-1, 3)
    return MetricSeries(cols[:, 0].copy(), cols[:, 1].copy(), cols[:, 2].copy())
