"""Estimation step: fold one observation into the parameter belief.

Given the prior ``(a, R)`` and an observation ``(X, y)``, the log-likelihood
is expanded to second order in the signal around ``f = X' a``. With
``g`` and ``H`` its gradient and Hessian there::

    Q = (-H)^{-1} + X' R X
    C = R - R X Q^{-1} X' R
    m = a + C X g

The mean is evaluated as ``a + R X Q^{-1} (-H)^{-1} g``, which is the same
quantity but keeps its precision when the prior is far more diffuse than the
likelihood. The result is exact for Gaussian responses. Three interchangeable routes are
provided (general, stable, univariate) plus the textbook Kalman update used
as a cross-check.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lu_factor, lu_solve

from .expfam import ObservationModel
from .statespace import (
    Belief,
    DynamicsSpec,
    NotPositiveSemidefiniteError,
    PriorPrediction,
    predict,
    symmetrize,
)

__all__ = [
    "FilteringError",
    "Observation",
    "UpdateDiagnostics",
    "update",
    "update_stable",
    "update_univariate",
    "kalman_update",
    "filter_stream",
]

log = logging.getLogger(__name__)

# Hessians with an eigenvalue this close to zero go through the stable route.
STABLE_SWITCH = 1e-8
# Condition numbers above these are treated as singular.
MAX_CONDITION = 1e12
MAX_INNER_CONDITION = 1e14


class FilteringError(ArithmeticError):
    """An update could not be carried out.

    ``diagnostics`` holds the :class:`UpdateDiagnostics` computed up to the
    failure, when available.
    """

    def __init__(self, message: str, diagnostics: "UpdateDiagnostics | None" = None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Observation:
    """Predictor matrix ``X`` (k x c) and response ``y`` (d,) for one step.

    A 1-d predictor is read as a single column.
    """

    predictor: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        X = np.array(self.predictor, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise ValueError(f"predictor must be 2-d, got shape {X.shape}")
        y = np.array(self.response, dtype=float).reshape(-1)
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "predictor", X)
        object.__setattr__(self, "response", y)


@dataclass(frozen=True)
class UpdateDiagnostics:
    predicted_signal: np.ndarray
    gradient_norm: float
    hessian_condition_estimate: float
    stabilized: bool


def _condition(a: np.ndarray) -> float:
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 1.0 if s.size == 0 else float("inf")
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")


def _check_dims(prior: PriorPrediction, X: np.ndarray, model: ObservationModel):
    if X.shape[0] != prior.dim:
        raise ValueError(f"predictor has {X.shape[0]} rows, prior has {prior.dim} parameters")
    if X.shape[1] != model.signal_dim:
        raise ValueError(f"predictor has {X.shape[1]} columns, model signal has {model.signal_dim}")


def _expand(prior: PriorPrediction, obs: Observation, model: ObservationModel):
    """Derivatives of the log-likelihood at the predicted signal."""
    X = obs.predictor
    _check_dims(prior, X, model)
    f = X.T @ prior.mean
    f_eval, clamped = model.clamp_signal(f)
    if not np.all(np.isfinite(f_eval)):
        raise FilteringError(
            f"predicted signal {f} cannot be brought into the model domain",
            UpdateDiagnostics(f, float("nan"), float("nan"), clamped),
        )
    if clamped:
        log.debug("predicted signal %s clamped to %s", f, f_eval)
    d = model.signal_derivatives(obs.response, f_eval)
    return X, f, clamped, d.gradient, d.hessian


def _posterior(prior, cov, shift, diag) -> tuple[Belief, UpdateDiagnostics]:
    cov = symmetrize(cov)
    mean = prior.mean + shift
    try:
        return Belief(mean, cov, step=prior.step), diag
    except (NotPositiveSemidefiniteError, ValueError) as exc:
        raise FilteringError(f"posterior rejected: {exc}", diag) from exc


def update(
    prior: PriorPrediction,
    obs: Observation,
    model: ObservationModel,
    *,
    allow_stable: bool = True,
) -> tuple[Belief, UpdateDiagnostics]:
    """Posterior moments after observing ``obs``.

    Parameters
    ----------
    prior : PriorPrediction
        Moments ``(a_t, R_t)`` from the prediction step.
    obs : Observation
    model : ObservationModel
    allow_stable : bool, default True
        When the Hessian has an eigenvalue of magnitude below ``STABLE_SWITCH``
        the call is routed to :func:`update_stable`. Pass False to force the
        direct route, which inverts ``-H`` and ``Q``.

    Returns
    -------
    Belief, UpdateDiagnostics

    Raises
    ------
    FilteringError
        ``-H`` or ``Q`` is numerically singular on the direct route.
    """
    X, f, clamped, grad, hess = _expand(prior, obs, model)
    if allow_stable and np.abs(np.linalg.eigvalsh(hess)).min() < STABLE_SWITCH:
        return _stable_from_derivatives(prior, X, f, clamped, grad, hess)

    neg_h = -hess
    diag = UpdateDiagnostics(f, float(np.linalg.norm(grad)), _condition(neg_h), clamped)
    c = neg_h.shape[0]
    if diag.hessian_condition_estimate > MAX_CONDITION:
        raise FilteringError(
            f"Hessian is numerically singular (condition {diag.hessian_condition_estimate:.2e}); "
            "use update_stable",
            diag,
        )
    R = prior.cov
    RX = R @ X
    curvature_inv = lu_solve(lu_factor(neg_h), np.eye(c))
    Q = symmetrize(curvature_inv) + symmetrize(X.T @ RX)
    if _condition(Q) > MAX_CONDITION:
        raise FilteringError("Q is numerically singular; use update_stable", diag)
    try:
        gain = cho_solve(cho_factor(Q, lower=True), RX.T)
    except LinAlgError:
        # indefinite Hessians (non-canonical models) leave Q non-PD
        gain = lu_solve(lu_factor(Q), RX.T)
    # C X g = R X Q^{-1} (-H)^{-1} g; avoids C, which loses digits when R >> (-H)^{-1}
    return _posterior(prior, R - RX @ gain, gain.T @ (curvature_inv @ grad), diag)


def update_stable(
    prior: PriorPrediction, obs: Observation, model: ObservationModel
) -> tuple[Belief, UpdateDiagnostics]:
    """Same posterior as :func:`update` without inverting the Hessian.

    Uses ``Q^{-1} = N - N Omega (I + N Omega)^{-1} N`` with ``N = -H`` and
    ``Omega = X' R X``. The only solve is against ``I + N Omega``, which stays
    well conditioned as ``N`` goes to zero.
    """
    X, f, clamped, grad, hess = _expand(prior, obs, model)
    return _stable_from_derivatives(prior, X, f, clamped, grad, hess)


def _stable_from_derivatives(prior, X, f, clamped, grad, hess):
    N = -hess
    diag = UpdateDiagnostics(f, float(np.linalg.norm(grad)), _condition(N), True)
    R = prior.cov
    RX = R @ X
    omega = symmetrize(X.T @ RX)
    inner = np.eye(N.shape[0]) + N @ omega
    inner_cond = _condition(inner)
    if not np.isfinite(inner_cond) or inner_cond > MAX_INNER_CONDITION:
        raise FilteringError(f"inner solve is ill-conditioned (condition {inner_cond:.2e})", diag)
    lu = lu_factor(inner)
    q_inv = N - N @ omega @ lu_solve(lu, N)
    # C X g = R X (I + N Omega)^{-1} g
    return _posterior(prior, R - RX @ symmetrize(q_inv) @ RX.T, RX @ lu_solve(lu, grad), diag)


def update_univariate(
    prior: PriorPrediction, x, y, model: ObservationModel
) -> tuple[Belief, UpdateDiagnostics]:
    """Scalar-signal update using only divisions and a rank-one correction.

    ``C = R + H / (1 - H x'Rx) (Rx)(Rx)'`` and ``m = a + C x g``, the latter
    evaluated as ``a + Rx g / (1 - H x'Rx)``.
    """
    if model.signal_dim != 1 or model.response_dim != 1:
        raise ValueError("update_univariate needs a model with scalar signal and response")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != prior.dim:
        raise ValueError(f"predictor has {x.size} entries, prior has {prior.dim} parameters")
    f = np.array([x @ prior.mean])
    f_eval, clamped = model.clamp_signal(f)
    d = model.signal_derivatives(np.array([y], dtype=float), f_eval)
    g = d.gradient[0]
    h = d.hessian[0, 0]
    diag = UpdateDiagnostics(f, abs(float(g)), 1.0 if h != 0 else float("inf"), clamped)
    Rx = prior.cov @ x
    denom = 1.0 - h * (x @ Rx)
    if not denom > 0:
        raise FilteringError(f"non-positive update denominator {denom}", diag)
    cov = prior.cov + (h / denom) * np.outer(Rx, Rx)
    cov = symmetrize(cov)
    # C x g = R x g / (1 - H x'Rx)
    mean = prior.mean + Rx * (g / denom)
    try:
        return Belief(mean, cov, step=prior.step), diag
    except (NotPositiveSemidefiniteError, ValueError) as exc:
        raise FilteringError(f"posterior rejected: {exc}", diag) from exc


def kalman_update(prior: PriorPrediction, obs: Observation, noise_cov) -> Belief:
    """Exact posterior for ``y = X' theta + e`` with ``e ~ N(0, noise_cov)``."""
    X = obs.predictor
    noise = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    if X.shape[0] != prior.dim or noise.shape != (X.shape[1], X.shape[1]):
        raise ValueError("kalman_update: inconsistent dimensions")
    R = prior.cov
    RX = R @ X
    Q = symmetrize(noise + X.T @ RX)
    try:
        gain = cho_solve(cho_factor(Q, lower=True), RX.T)
        resid = cho_solve(cho_factor(noise, lower=True), obs.response - X.T @ prior.mean)
    except LinAlgError as exc:
        raise FilteringError(f"singular innovation covariance: {exc}") from exc
    cov = symmetrize(R - RX @ gain)
    return Belief(prior.mean + cov @ X @ resid, cov, step=prior.step)


def filter_stream(
    belief: Belief,
    observations: Iterable[Observation],
    dynamics: DynamicsSpec | Iterable[DynamicsSpec],
    model: ObservationModel,
) -> Iterator[tuple[Belief, UpdateDiagnostics]]:
    """Run predict/update over a stream of observations, in order.

    ``dynamics`` is either one spec reused every step or an iterable yielding
    one spec per observation.
    """
    specs = None if isinstance(dynamics, DynamicsSpec) else iter(dynamics)
    for obs in observations:
        dyn = dynamics if specs is None else next(specs)
        prior = predict(belief, dyn)
        try:
            belief, diag = update(prior, obs, model)
        except FilteringError as exc:
            raise FilteringError(f"step {prior.step}: {exc}", exc.diagnostics) from exc
        yield belief, diag
