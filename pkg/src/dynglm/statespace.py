"""Linear-Gaussian parameter dynamics and the prediction step.

Parameters evolve as ``theta_t = G theta_{t-1} + B u_{t-1} + omega_t`` with
``omega_t`` zero-mean noise of covariance ``W``. Prediction propagates the
first two moments exactly, whatever the shape of the belief.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NotPositiveSemidefiniteError",
    "Belief",
    "DynamicsSpec",
    "PriorPrediction",
    "SignalPrediction",
    "ensure_psd",
    "symmetrize",
    "predict",
    "predict_signal",
    "pack_belief",
    "unpack_belief",
]

PSD_TOL = 1e-10
JITTER_START = 1e-10
JITTER_LIMIT = 1e-8


class NotPositiveSemidefiniteError(np.linalg.LinAlgError):
    """Covariance too far from positive semidefinite to be repaired by jitter."""


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def ensure_psd(cov, name: str = "covariance") -> np.ndarray:
    """Symmetrize ``cov`` and enforce the PSD jitter policy.

    A smallest eigenvalue of at least ``-PSD_TOL`` is accepted as is. Between
    ``-JITTER_LIMIT`` and ``-PSD_TOL`` a diagonal jitter, starting at
    ``JITTER_START`` and growing tenfold, is added until the matrix passes.
    Anything more negative raises :class:`NotPositiveSemidefiniteError`.
    """
    cov = np.array(cov, dtype=float, ndmin=2)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise NotPositiveSemidefiniteError(f"{name} has non-finite entries")
    cov = symmetrize(cov)
    k = cov.shape[0]
    if k == 0:
        return cov
    eye = np.eye(k)
    try:
        # cheap acceptance test; only falls through near the boundary
        np.linalg.cholesky(cov + PSD_TOL * eye)
        return cov
    except np.linalg.LinAlgError:
        pass
    w_min = np.linalg.eigvalsh(cov)[0]
    if w_min >= -PSD_TOL:
        return cov
    if w_min < -JITTER_LIMIT:
        raise NotPositiveSemidefiniteError(
            f"{name} has smallest eigenvalue {w_min:.3e} < {-JITTER_LIMIT:.0e}"
        )
    eps = JITTER_START
    while w_min + eps < -PSD_TOL:
        eps *= 10.0
    return cov + eps * eye


def _vector(x, name: str) -> np.ndarray:
    x = np.array(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite entries")
    return x


def _lock(obj, **arrays):
    for key, value in arrays.items():
        value.setflags(write=False)
        object.__setattr__(obj, key, value)


@dataclass(frozen=True)
class Belief:
    """Mean ``m_t`` and covariance ``C_t`` of the parameters after step ``t``."""

    mean: np.ndarray
    cov: np.ndarray
    step: int = 0

    def __post_init__(self):
        mean = _vector(self.mean, "belief mean")
        cov = ensure_psd(self.cov, "belief covariance")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"belief covariance {cov.shape} does not match mean of size {mean.size}")
        if self.step < 0:
            raise ValueError("step must be non-negative")
        _lock(self, mean=mean, cov=cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class PriorPrediction:
    """Mean ``a_t`` and covariance ``R_t`` of the parameters before seeing ``y_t``.

    ``step`` is the index ``t`` the prediction is for; the posterior produced
    from it carries the same index.
    """

    mean: np.ndarray
    cov: np.ndarray
    step: int = 0

    def __post_init__(self):
        mean = _vector(self.mean, "prior mean")
        cov = ensure_psd(self.cov, "prior covariance")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"prior covariance {cov.shape} does not match mean of size {mean.size}")
        _lock(self, mean=mean, cov=cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class DynamicsSpec:
    """One step of ``theta_t = G theta_{t-1} + Bu + omega_t``.

    Parameters
    ----------
    transition : array_like of shape (k, k)
        ``G``.
    process_noise : array_like of shape (k, k)
        Covariance ``W`` of ``omega_t``.
    input_effect : array_like of shape (k,), optional
        The deterministic drive ``B u``, already multiplied out. Zero if omitted.
    """

    transition: np.ndarray
    process_noise: np.ndarray
    input_effect: np.ndarray | None = field(default=None)

    def __post_init__(self):
        g = np.array(self.transition, dtype=float, ndmin=2)
        k = g.shape[0]
        if g.shape != (k, k):
            raise ValueError(f"transition must be square, got {g.shape}")
        w = ensure_psd(self.process_noise, "process noise")
        if w.shape != (k, k):
            raise ValueError(f"process noise {w.shape} does not match transition {g.shape}")
        bu = np.zeros(k) if self.input_effect is None else _vector(self.input_effect, "input effect")
        if bu.shape != (k,):
            raise ValueError(f"input effect has {bu.size} entries, expected {k}")
        _lock(self, transition=g, process_noise=w, input_effect=bu)

    @classmethod
    def random_walk(cls, process_noise) -> "DynamicsSpec":
        """``G = I`` and no input: parameters diffuse with covariance ``W``."""
        w = np.array(process_noise, dtype=float, ndmin=2)
        return cls(np.eye(w.shape[0]), w)

    @classmethod
    def static(cls, k: int) -> "DynamicsSpec":
        return cls(np.eye(k), np.zeros((k, k)))

    @property
    def dim(self) -> int:
        return self.transition.shape[0]


@dataclass(frozen=True)
class SignalPrediction:
    """Moments of the signal ``lam_t = X' theta_t`` under the prior.

    ``cross_cov`` is ``X' R``, the covariance between signal and parameters.
    """

    mean: np.ndarray
    cov: np.ndarray
    cross_cov: np.ndarray


def predict(belief: Belief, dyn: DynamicsSpec) -> PriorPrediction:
    """Propagate a belief one step through the dynamics.

    ``a = G m + Bu`` and ``R = G C G' + W``; exact for any belief
    distribution with these first two moments.
    """
    if dyn.dim != belief.dim:
        raise ValueError(f"dynamics of dimension {dyn.dim} applied to belief of dimension {belief.dim}")
    g = dyn.transition
    mean = g @ belief.mean + dyn.input_effect
    cov = g @ belief.cov @ g.T + dyn.process_noise
    return PriorPrediction(mean, cov, step=belief.step + 1)


def predict_signal(prior: PriorPrediction, X) -> SignalPrediction:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != prior.dim:
        raise ValueError(f"predictor has {X.shape[0]} rows, prior has {prior.dim} parameters")
    cross = X.T @ prior.cov
    return SignalPrediction(mean=X.T @ prior.mean, cov=symmetrize(cross @ X), cross_cov=cross)


# Checkpoint encoding: mean (k doubles) then the lower triangle of the
# covariance in row-major order (k(k+1)/2 doubles), all little-endian.


def pack_belief(belief: Belief) -> bytes:
    k = belief.dim
    rows, cols = np.tril_indices(k)
    payload = np.concatenate([belief.mean, belief.cov[rows, cols]])
    return payload.astype("<f8").tobytes()


def unpack_belief(data: bytes, step: int = 0) -> Belief:
    if len(data) % 8:
        raise ValueError("belief payload is not a whole number of float64 values")
    values = np.frombuffer(data, dtype="<f8").astype(float)
    n = values.size
    # n = k + k(k+1)/2  ->  k^2 + 3k - 2n = 0
    k = int(round((-3 + np.sqrt(9 + 8 * n)) / 2))
    if k == 0 or k + k * (k + 1) // 2 != n:
        raise ValueError(f"{n} values do not encode a belief")
    cov = np.zeros((k, k))
    rows, cols = np.tril_indices(k)
    cov[rows, cols] = values[k:]
    cov[cols, rows] = values[k:]
    return Belief(values[:k], cov, step=step)

