"""Contextual bandit pieces: context matrices, Thompson sampling, regret.

All arms share one parameter vector. The context matrix of an arm stacks
arm indicators, shared continuous and categorical predictors, and their
interactions with the arm, so that the same filter learns every arm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expfam import ObservationModel
from .statespace import PriorPrediction

__all__ = [
    "ContextFactors",
    "RoundRecord",
    "RewardSpec",
    "CoordinateReward",
    "LinearReward",
    "SamplingError",
    "context_dim",
    "build_context",
    "psd_factor",
    "sample_parameters",
    "argmax_arm",
    "expected_rewards",
    "thompson_select",
    "arm_regrets",
    "regret",
    "THOMPSON_VARIANTS",
]

THOMPSON_VARIANTS = ("per_arm", "shared")
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class SamplingError(np.linalg.LinAlgError):
    """The prior covariance could not be factored for sampling."""


@dataclass(frozen=True)
class ContextFactors:
    """Per-round predictors used to build every arm's context matrix.

    Attributes
    ----------
    num_arms : int
    continuous : ndarray of shape (k1, c)
        Continuous predictors, one column per response entry.
    categorical : ndarray of shape (k2,)
        One-hot category indicator.
    continuous_cov : ndarray of shape (k1, k1), optional
        Covariance the continuous columns were drawn from. Informational.
    """

    num_arms: int
    continuous: np.ndarray
    categorical: np.ndarray
    continuous_cov: np.ndarray | None = None

    def __post_init__(self):
        if self.num_arms < 1:
            raise ValueError("num_arms must be positive")
        xc = np.array(self.continuous, dtype=float, ndmin=2)
        xd = np.array(self.categorical, dtype=float).reshape(-1)
        if xd.size and not (np.count_nonzero(xd) == 1 and xd.sum() == 1.0 and xd.max() == 1.0):
            raise ValueError(f"categorical predictor must be one-hot, got {xd}")
        object.__setattr__(self, "continuous", xc)
        object.__setattr__(self, "categorical", xd)

    @property
    def k1(self) -> int:
        return self.continuous.shape[0]

    @property
    def k2(self) -> int:
        return self.categorical.size

    @property
    def num_columns(self) -> int:
        return self.continuous.shape[1]


@dataclass(frozen=True)
class RoundRecord:
    round: int
    chosen_arm: int
    optimal_arm: int
    reward: float
    regret: float
    random_regret: float


class RewardSpec:
    """Deterministic reward ``r = weights . y + offset``.

    Linear rewards commute with expectation, so the expected reward at a
    signal is ``weights . h(lam) + offset``.
    """

    def __init__(self, weights, offset: float = 0.0):
        self.weights = np.asarray(weights, dtype=float).reshape(-1)
        self.offset = float(offset)

    def extract(self, y) -> float:
        return float(self.weights @ np.asarray(y, dtype=float).reshape(-1) + self.offset)

    def expected(self, model: ObservationModel, lam) -> float:
        return float(self.weights @ model.response_mean(lam) + self.offset)

    def expected_batch(self, model: ObservationModel, lams) -> np.ndarray:
        """Expected rewards for signals stacked as rows."""
        return model.response_mean_batch(lams) @ self.weights + self.offset

    def __repr__(self) -> str:
        return f"{type(self).__name__}(weights={self.weights.tolist()}, offset={self.offset})"


class CoordinateReward(RewardSpec):
    """Reward equal to one response entry."""

    def __init__(self, index: int, response_dim: int):
        if not 0 <= index < response_dim:
            raise ValueError(f"reward index {index} outside response of size {response_dim}")
        w = np.zeros(response_dim)
        w[index] = 1.0
        super().__init__(w)
        self.index = index

    def extract(self, y) -> float:
        return float(np.asarray(y, dtype=float).reshape(-1)[self.index])


LinearReward = RewardSpec


def context_dim(num_arms: int, k1: int, k2: int) -> int:
    return num_arms + (k1 + k2) * (num_arms + 1)


def build_context(factors: ContextFactors, arm: int) -> np.ndarray:
    """Context matrix of shape ``(A + (k1 + k2)(A + 1), c)`` for ``arm``.

    Row blocks, top to bottom: arm indicator, continuous predictors,
    categorical indicator, arm x continuous, arm x categorical.
    """
    A = factors.num_arms
    if not 0 <= arm < A:
        raise IndexError(f"arm {arm} out of range for {A} arms")
    k1, k2, c = factors.k1, factors.k2, factors.num_columns
    X = np.zeros((context_dim(A, k1, k2), c))
    # 1' (x) i(a): only row `arm` is nonzero
    X[arm] = 1.0
    row = A
    X[row : row + k1] = factors.continuous
    row += k1
    X[row : row + k2] = factors.categorical[:, None]
    row += k2
    # i(a) (x) X_c and i(a) (x) (1' (x) x_d): arm's slice of each block
    X[row + arm * k1 : row + (arm + 1) * k1] = factors.continuous
    row += A * k1
    X[row + arm * k2 : row + (arm + 1) * k2] = factors.categorical[:, None]
    return X


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """A matrix ``L`` with ``L L' = cov`` (up to jitter), for sampling.

    Tries Cholesky, then an eigen-factorization with negative eigenvalues
    lifted by a diagonal jitter escalating from 0 to 1e-6.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    tol = 1e-12 * max(1.0, abs(w[-1]))
    for eps in _JITTERS:
        if w[0] + eps >= -tol:
            return v * np.sqrt(np.clip(w + eps, 0.0, None))
    raise SamplingError(f"covariance has eigenvalue {w[0]:.3e}; jitter up to 1e-6 is not enough")


def sample_parameters(prior: PriorPrediction, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws from ``N(prior.mean, prior.cov)``, one per row."""
    L = psd_factor(prior.cov)
    z = rng.standard_normal((n, prior.dim))
    return prior.mean + z @ L.T


def argmax_arm(values) -> int:
    """Index of the largest value; ties go to the lowest index."""
    return int(np.argmax(np.asarray(values, dtype=float)))


def expected_rewards(
    params: np.ndarray, contexts: Sequence[np.ndarray], model: ObservationModel, reward: RewardSpec
) -> np.ndarray:
    """Expected reward of each arm. ``params`` is one vector or one row per arm."""
    params = np.asarray(params, dtype=float)
    X = np.asarray(contexts, dtype=float)
    if params.ndim == 1:
        lams = np.einsum("akc,k->ac", X, params)
    else:
        lams = np.einsum("akc,ak->ac", X, params)
    return reward.expected_batch(model, lams)


def thompson_select(
    prior: PriorPrediction,
    contexts: Sequence[np.ndarray],
    model: ObservationModel,
    reward: RewardSpec,
    rng_seed,
    variant: str = "per_arm",
) -> int:
    """Pick an arm by Thompson sampling.

    Parameters
    ----------
    prior : PriorPrediction
        Current ``N(a_t, R_t)`` belief over the parameters.
    contexts : sequence of ndarray
        Context matrix for each arm.
    model, reward
        Observation model and reward map used to score a sampled parameter.
    rng_seed : int, SeedSequence or Generator
        Source of randomness. A Generator is consumed in place.
    variant : {"per_arm", "shared"}
        ``per_arm`` draws an independent parameter vector for each arm;
        ``shared`` scores every arm with a single draw.
    """
    if variant not in THOMPSON_VARIANTS:
        raise ValueError(f"unknown Thompson variant {variant!r}")
    rng = np.random.default_rng(rng_seed)
    n = len(contexts) if variant == "per_arm" else 1
    theta = sample_parameters(prior, n, rng)
    if variant == "shared":
        theta = theta[0]
    return argmax_arm(expected_rewards(theta, contexts, model, reward))


def arm_regrets(true_params, contexts, model: ObservationModel, reward: RewardSpec) -> np.ndarray:
    """Regret of every arm under the true parameters."""
    means = expected_rewards(true_params, contexts, model, reward)
    return means.max() - means


def regret(true_params, contexts, chosen: int, model: ObservationModel, reward: RewardSpec):
    """Return ``(regret, optimal_arm)`` for playing ``chosen``."""
    means = expected_rewards(true_params, contexts, model, reward)
    best = argmax_arm(means)
    return float(means[best] - means[chosen]), best
