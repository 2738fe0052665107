"""Acceptance suite. Each ``test_acN_*`` function checks one criterion at its
stated tolerance; ``conftest.py`` prints one PASS/FAIL line per criterion.

The simulation criteria (AC6, AC7) take a few minutes on one core.
"""

import ast
import inspect
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest
import scipy.linalg

import dynglm.expfam as expfam_mod
import dynglm.filter as filter_mod
from dynglm.expfam import BernoulliLogit, Exponential, Gaussian, Poisson
from dynglm.filter import Observation, filter_stream, kalman_update, update, update_stable, update_univariate
from dynglm.sim import SimConfig, aggregate_runs
from dynglm.statespace import Belief, DynamicsSpec, PriorPrediction, predict
from instances import contraction_margin, random_point, random_problem, sample_response, shipped_models
from oracles import batch_gaussian_posterior, fd_derivative, fd_hessian, fd_gradient, grid_posterior, random_spd, rel_err


# -- AC1 ----------------------------------------------------------------------


def test_ac1_linear_gaussian_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(1001)
    worst = 0.0
    for _ in range(20):
        k, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        S = random_spd(rng, d, 0.2, 2.0)
        model = Gaussian(S)
        prior, obs = random_problem(model, rng, k)
        general, _ = update(prior, obs, model, allow_stable=False)
        stable, _ = update_stable(prior, obs, model)
        kalman = kalman_update(prior, obs, S)
        for a, b in ((general, stable), (general, kalman), (stable, kalman)):
            worst = max(worst, np.abs(a.mean - b.mean).max(), np.abs(a.cov - b.cov).max())
    assert worst < 1e-8, worst

    k, d = 5, 3
    S = random_spd(rng, d, 0.3, 1.5)
    theta = rng.normal(size=k)
    Xs = [rng.normal(size=(k, d)) for _ in range(50)]
    ys = [rng.multivariate_normal(X.T @ theta, S) for X in Xs]
    m0, C0 = rng.normal(size=k), random_spd(rng, k, 0.5, 3.0)
    obs = [Observation(X, y) for X, y in zip(Xs, ys)]
    *_, (post, _) = filter_stream(Belief(m0, C0), obs, DynamicsSpec.static(k), Gaussian(S))
    mean, cov = batch_gaussian_posterior(m0, C0, Xs, ys, [S] * 50)
    assert np.abs(post.mean - mean).max() < 1e-8
    assert np.abs(post.cov - cov).max() < 1e-8
    assert time.perf_counter() - start < 5.0


# -- AC2 ----------------------------------------------------------------------


def test_ac2_derivatives_match_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(1002)
    worst = {}
    for model in shipped_models():
        errs = []
        for _ in range(100):
            y, lam = random_point(model, rng)
            d = model.signal_derivatives(y, lam)
            l = lambda z: model.log_likelihood(y, z)
            errs.append(max(rel_err(d.gradient, fd_gradient(l, lam, h=1e-5)), rel_err(d.hessian, fd_hessian(l, lam))))
        worst[repr(model)] = max(errs)
    print("worst relative error per model:", worst)
    assert max(worst.values()) < 1e-5, worst
    assert time.perf_counter() - start < 5.0


# -- AC3 ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "model",
    [Gaussian(1.3), Gaussian(random_spd(np.random.default_rng(3), 2)), Poisson(), BernoulliLogit(), Exponential()],
    ids=repr,
)
def test_ac3_mgf_moment_identities(model):
    # K(t) = log E exp(t'y) = b(eta + Phi t) - b(eta); K'(0) is the mean, K''(0) the covariance
    rng = np.random.default_rng(1003)
    phi = model.nuisance
    worst = 0.0
    for _ in range(25):
        _, eta = random_point(model, rng)
        K = lambda t: model.log_partition(eta + phi @ t) - model.log_partition(eta)
        zero = np.zeros(model.signal_dim)
        worst = max(
            worst,
            rel_err(fd_derivative(K, zero, h=1e-3), model.response_mean(eta), floor=1e-12),
            rel_err(fd_hessian(K, zero, h=1e-2), model.response_cov(eta), floor=1e-12),
        )
    assert worst < 1e-4, worst


# -- AC4 ----------------------------------------------------------------------

# Instances: prior mean ~ N(0, 0.7^2) per entry, prior covariance with
# eigenvalues in [0.05, 0.5], predictor rescaled to a chosen prior signal
# variance x'Rx. Logistic uses x'Rx in [0.1, 2]; Poisson in [0.02, 0.2].
# Larger Poisson spreads make one count dominate the prior and the
# second-order expansion at the prior mean drifts from the exact posterior
# (see test_poisson_gap_grows_with_prior_spread).
AC4_SPREAD = {"logistic": (0.1, 2.0), "poisson": (0.02, 0.2)}


def ac4_instance(rng, kind, k, spread):
    a = rng.normal(0, 0.7, k)
    R = random_spd(rng, k, 0.05, 0.5)
    x = rng.normal(size=k)
    x *= np.sqrt(rng.uniform(*spread) / (x @ R @ x))
    lam = x @ rng.multivariate_normal(a, R)
    if kind == "logistic":
        y = float(rng.random() < 1 / (1 + np.exp(-lam)))
    else:
        y = float(rng.poisson(np.exp(lam)))
    return a, R, x, y


def filter_vs_grid(kind, a, R, x, y):
    model = BernoulliLogit() if kind == "logistic" else Poisson()
    post, _ = update(PriorPrediction(a, R), Observation(x, [y]), model)
    mean, cov = grid_posterior(kind, a, R, x, y, n=400)
    mean_err = np.abs(post.mean - mean).max()
    sd_err = np.max(np.abs(np.sqrt(np.diag(post.cov)) / np.sqrt(np.diag(cov)) - 1))
    return mean_err, sd_err


def test_ac4_posterior_matches_grid_quadrature():
    start = time.perf_counter()
    rng = np.random.default_rng(1004)
    rows = []
    for i in range(20):
        kind = ("logistic", "poisson")[i % 2]
        k = 1 + (i // 2) % 2
        rows.append((kind, k, *filter_vs_grid(kind, *ac4_instance(rng, kind, k, AC4_SPREAD[kind]))))
    for kind, k, me, se in rows:
        print(f"{kind:8s} k={k} mean_err={me:.4f} sd_rel_err={se:.4f}")
    assert max(r[2] for r in rows) < 0.05
    assert max(r[3] for r in rows) < 0.20
    assert time.perf_counter() - start < 60.0


def test_poisson_gap_grows_with_prior_spread():
    # documents the approximation gap rather than hiding it: with a diffuse
    # prior on the signal the Poisson update misses the exact posterior mean
    rng = np.random.default_rng(1005)
    narrow = [filter_vs_grid("poisson", *ac4_instance(rng, "poisson", 1, (0.02, 0.2)))[0] for _ in range(30)]
    wide = [filter_vs_grid("poisson", *ac4_instance(rng, "poisson", 1, (1.0, 2.0)))[0] for _ in range(30)]
    print(f"median mean error: narrow {np.median(narrow):.4f}, wide {np.median(wide):.4f}")
    assert np.median(wide) > 3 * np.median(narrow)
    assert np.mean(np.array(wide) > 0.05) > 0.5


# -- AC5 ----------------------------------------------------------------------


def test_ac5_covariance_contraction():
    rng = np.random.default_rng(1006)
    margins = []
    models = shipped_models()
    for model in models:
        for _ in range(40):
            k = int(rng.integers(1, 7))
            prior, obs = random_problem(model, rng, k, scale=float(rng.choice([0.3, 1.0, 3.0])))
            margins.append(contraction_margin(prior.cov, update(prior, obs, model)[0].cov))
            margins.append(contraction_margin(prior.cov, update_stable(prior, obs, model)[0].cov))
            if model.signal_dim == 1:
                uni, _ = update_univariate(prior, obs.predictor[:, 0], obs.response[0], model)
                margins.append(contraction_margin(prior.cov, uni.cov))
    # saturated and clamped signals
    for model, mean, y in ((BernoulliLogit(), 30.0, 1.0), (BernoulliLogit(), -40.0, 1.0), (Poisson(), 8.0, 2.0), (Exponential(), -1.0, 0.5)):
        prior = PriorPrediction([mean, 0.0], [[1.0, 0.3], [0.3, 1.0]])
        margins.append(contraction_margin(prior.cov, update(prior, Observation([1.0, 0.5], [y]), model)[0].cov))
    # filtering streams with drift
    for model in (Gaussian(0.5), Poisson(), BernoulliLogit(), Exponential()):
        k = 4
        belief = Belief(np.full(k, 0.5), np.eye(k))
        theta = belief.mean.copy()
        dyn = DynamicsSpec.random_walk(0.01 * np.eye(k))
        for _ in range(150):
            prior = predict(belief, dyn)
            theta = theta + rng.normal(0, 0.1, k)
            x = np.abs(rng.normal(size=k)) / 2
            y = sample_response(model, [x @ theta], rng)
            belief, _ = update(prior, Observation(x, y), model)
            margins.append(contraction_margin(prior.cov, belief.cov))
    print(f"{len(margins)} updates, smallest eigenvalue of R - C: {min(margins):.3e}")
    assert min(margins) >= -1e-10


# -- AC6 / AC7 ----------------------------------------------------------------


@pytest.fixture(scope="module")
def arm_sweep():
    start = time.perf_counter()
    series = {A: aggregate_runs(SimConfig(num_arms=A, seed=2024)) for A in (2, 5, 10)}
    return series, time.perf_counter() - start


@pytest.mark.slow
def test_ac6_error_fraction_band(arm_sweep):
    series, elapsed = arm_sweep
    ef = series[10].error_fraction
    print(f"A=10 error_fraction: round 1 {ef[0]:.3f}, round 100 {ef[99]:.3f}, round 2000 {ef[-1]:.3f}")
    assert len(ef) == 2000
    assert ef[-1] <= 0.5
    assert np.all(ef[100:] <= ef[99])
    assert elapsed < 600


@pytest.mark.slow
def test_ac6_regret_below_half_random(arm_sweep):
    s = arm_sweep[0][10]
    print(f"A=10 regret_rate {s.regret_rate[-1]:.4f}, random {s.random_regret_rate[-1]:.4f}")
    assert s.regret_rate[-1] <= 0.5 * s.random_regret_rate[-1]


@pytest.mark.slow
def test_ac6_benefit_grows_with_arms(arm_sweep):
    series = arm_sweep[0]
    gaps = [series[A].random_regret_rate[-1] - series[A].regret_rate[-1] for A in (2, 5, 10)]
    print("random_regret_rate - regret_rate at round 2000 for A=2,5,10:", [round(float(g), 4) for g in gaps])
    assert gaps[0] < gaps[1] < gaps[2]


@pytest.mark.slow
def test_regret_rate_grows_with_arms(arm_sweep):
    series = arm_sweep[0]
    rates = [series[A].regret_rate[-1] for A in (2, 5, 10)]
    print("regret_rate at round 2000 for A=2,5,10:", [round(float(r), 4) for r in rates])
    assert rates[0] < rates[1] < rates[2]


@pytest.mark.slow
def test_ac7_drift_stress():
    s = aggregate_runs(SimConfig(drift_rate=1.0, seed=2024))
    tail = s.regret_rate[1500:]
    slope = np.polyfit(np.arange(tail.size), tail, 1)[0]
    print(
        f"c1=1: regret_rate {s.regret_rate[1499]:.4f} -> {s.regret_rate[-1]:.4f} over the last 500 rounds "
        f"(slope {slope:.2e}), random {s.random_regret_rate[-1]:.4f}"
    )
    assert s.regret_rate[-1] < s.random_regret_rate[-1]
    assert s.regret_rate[-1] < s.regret_rate[1499]
    assert slope < 0


# -- AC8 ----------------------------------------------------------------------


def test_ac8_simulate_is_byte_deterministic(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("# defaults otherwise\nrounds = 2000\nnum_arms = 10\n")
    outputs = []
    for name in ("first", "second"):
        proc = subprocess.run(
            [sys.executable, "-m", "dynglm", "simulate", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        outputs.append([(tmp_path / (name + s)).read_bytes() for s in (".rounds.csv", ".metrics.csv")])
    assert outputs[0] == outputs[1]
    assert outputs[0][0].count(b"\n") == 2001


# -- AC9 ----------------------------------------------------------------------

SOLVERS = {"solve", "inv", "pinv", "lstsq", "lu_factor", "lu_solve", "cho_factor", "cho_solve", "solve_triangular", "tensorsolve"}


def _called_names(func):
    tree = ast.parse(textwrap.dedent(inspect.getsource(func)))
    names = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Call):
            f = node.func
            names.add(f.id if isinstance(f, ast.Name) else getattr(f, "attr", ""))
    return names


def test_ac9_univariate_fast_path(monkeypatch):
    assert not _called_names(update_univariate) & SOLVERS

    rng = np.random.default_rng(1009)
    cases = []
    for model in (Poisson(), BernoulliLogit(), Exponential(), Gaussian(0.8)):
        for _ in range(100):
            prior, obs = random_problem(model, rng, int(rng.integers(1, 7)))
            general, _ = update(prior, obs, model)
            cases.append((model, prior, obs, general))

    def forbidden(*args, **kwargs):
        raise AssertionError("linear solve called on the univariate path")

    for name in ("solve", "inv", "pinv", "lstsq", "tensorsolve"):
        monkeypatch.setattr(np.linalg, name, forbidden)
    for name in ("solve", "inv", "pinv", "lstsq", "lu_factor", "lu_solve", "cho_factor", "cho_solve", "solve_triangular"):
        monkeypatch.setattr(scipy.linalg, name, forbidden)
    for module in (filter_mod, expfam_mod):
        for name in SOLVERS:
            if hasattr(module, name):
                monkeypatch.setattr(module, name, forbidden)

    worst = 0.0
    for model, prior, obs, general in cases:
        uni, _ = update_univariate(prior, obs.predictor[:, 0], obs.response[0], model)
        worst = max(worst, np.abs(uni.mean - general.mean).max(), np.abs(uni.cov - general.cov).max())
    print(f"largest difference from the general path over {len(cases)} instances: {worst:.2e}")
    assert worst < 1e-10
