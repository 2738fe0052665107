"""Observation models in natural exponential form.

Each model describes ``p(y | lam)`` where ``lam`` is the signal ``X' theta``.
The log-likelihood has the shape::

    l(y | eta) = eta' Phi^{-1} y - b(eta) + c(y)

with the natural parameter ``eta`` equal to the signal for every model shipped
here (canonical link). ``b`` is exposed as :meth:`ObservationModel.log_partition`
so the moment identities ``mu = Phi b'(eta)`` and ``Sigma_y = Phi b''(eta) Phi``
can be checked numerically.

Terms of ``c(y)`` that do not depend on the signal are dropped as documented
on each model, so log-likelihood values are comparable for a fixed response
but are not normalized densities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve
from scipy.special import expit, log_expit

__all__ = [
    "DomainError",
    "SignalDerivatives",
    "ObservationModel",
    "Gaussian",
    "Poisson",
    "Exponential",
    "BernoulliLogit",
    "Product",
    "product_model",
    "make_model",
    "MODEL_NAMES",
    "log_likelihood",
    "response_mean",
    "response_cov",
    "signal_derivatives",
]

# exp() argument ceiling; beyond it the Poisson rate saturates instead of
# overflowing to inf.
POISSON_MAX_SIGNAL = 700.0
EXPONENTIAL_MIN_SIGNAL = 1e-8
EXPONENTIAL_CLAMP = 1e-3


class DomainError(ValueError):
    """Signal or response outside the support of an observation model."""


@dataclass(frozen=True)
class SignalDerivatives:
    """Gradient and Hessian of the log-likelihood with respect to the signal."""

    gradient: np.ndarray
    hessian: np.ndarray


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class ObservationModel:
    """Base class for observation models.

    Subclasses define ``response_dim``, ``signal_dim``, ``nuisance`` and the
    response mean/covariance. Canonical models inherit the closed-form
    derivatives::

        grad = Phi^{-1} (y - h(lam))
        hess = -Phi^{-1} Sigma_y(lam) Phi^{-1}

    Instances are immutable.
    """

    name: str = "abstract"
    canonical: bool = True

    response_dim: int
    signal_dim: int

    @property
    def nuisance(self) -> np.ndarray:
        raise NotImplementedError

    def log_likelihood(self, y, lam) -> float:
        raise NotImplementedError

    def response_mean(self, lam) -> np.ndarray:
        return self._response_mean(self.check_signal(lam))

    def response_cov(self, lam) -> np.ndarray:
        return self._response_cov(self.check_signal(lam))

    def response_mean_batch(self, lams) -> np.ndarray:
        """Response means for a stack of signals, shape ``(n, c) -> (n, d)``."""
        lams = np.asarray(lams, dtype=float)
        if lams.ndim != 2 or lams.shape[1] != self.signal_dim:
            raise ValueError(f"expected signals of shape (n, {self.signal_dim}), got {lams.shape}")
        if not np.isfinite(lams).all():
            raise DomainError("non-finite signal in batch")
        self._check_signal_domain(lams)
        return self._response_mean_batch(lams)

    # unchecked kernels; callers validate first. Domain hooks and batch
    # kernels index the last axis so they accept (c,) and (n, c) alike.
    def _response_mean(self, lam: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _response_mean_batch(self, lams: np.ndarray) -> np.ndarray:
        return np.array([self._response_mean(lam) for lam in lams]).reshape(len(lams), self.response_dim)

    def _response_cov(self, lam: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_partition(self, eta) -> float:
        """The cumulant function ``b(eta)`` of the natural exponential form."""
        raise NotImplementedError

    def signal_derivatives(self, y, lam) -> SignalDerivatives:
        if not self.canonical:
            raise NotImplementedError(
                f"{type(self).__name__} must implement signal_derivatives"
            )
        y = self.check_response(y)
        lam = self.check_signal(lam)
        err = y - self._response_mean(lam)
        grad = self._nuisance_solve(err)
        hess = -self._nuisance_solve(self._nuisance_solve(self._response_cov(lam)).T)
        hess = 0.5 * (hess + hess.T)
        return SignalDerivatives(gradient=grad, hessian=hess)

    def clamp_signal(self, lam) -> tuple[np.ndarray, bool]:
        """Map a predicted signal into the region where derivatives are defined.

        Returns the (possibly modified) signal and whether it was changed.
        """
        return np.asarray(lam, dtype=float).reshape(self.signal_dim), False

    def check_signal(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=float).reshape(-1)
        if lam.shape != (self.signal_dim,):
            raise ValueError(
                f"signal has {lam.size} entries, model expects {self.signal_dim}"
            )
        if not np.isfinite(lam).all():
            raise DomainError(f"non-finite signal {lam}")
        self._check_signal_domain(lam)
        return lam

    def check_response(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape != (self.response_dim,):
            raise ValueError(
                f"response has {y.size} entries, model expects {self.response_dim}"
            )
        if not np.isfinite(y).all():
            raise DomainError(f"non-finite response {y}")
        self._check_response_domain(y)
        return y

    def _check_signal_domain(self, lam: np.ndarray) -> None:
        """Raise DomainError if a finite, well-shaped signal is inadmissible."""

    def _check_response_domain(self, y: np.ndarray) -> None:
        """Raise DomainError if a finite, well-shaped response is outside the support."""

    def _nuisance_solve(self, b: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.nuisance, b)

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class _ScalarModel(ObservationModel):
    """Univariate canonical model with scalar nuisance ``phi``."""

    response_dim = 1
    signal_dim = 1
    phi: float = 1.0

    @property
    def nuisance(self) -> np.ndarray:
        return np.array([[self.phi]])

    def _nuisance_solve(self, b):
        return np.asarray(b, dtype=float) / self.phi

    # scalar kernels, overridden per model
    def _mean(self, lam: float) -> float:
        raise NotImplementedError

    def _var(self, lam: float) -> float:
        raise NotImplementedError

    def _loglik(self, y: float, lam: float) -> float:
        raise NotImplementedError

    def _b(self, eta: float) -> float:
        raise NotImplementedError

    def log_likelihood(self, y, lam) -> float:
        y = self.check_response(y)
        lam = self.check_signal(lam)
        return float(self._loglik(y[0], lam[0]))

    def _response_mean(self, lam):
        return np.array([self._mean(lam[0])])

    def _response_mean_batch(self, lams):
        return np.asarray(self._mean(lams[:, 0]), dtype=float)[:, None]

    def _response_cov(self, lam):
        return np.array([[self._var(lam[0])]])

    def log_partition(self, eta) -> float:
        eta = self.check_signal(eta)
        return float(self._b(eta[0]))

    def signal_derivatives(self, y, lam) -> SignalDerivatives:
        y = self.check_response(y)
        lam = self.check_signal(lam)
        grad = (y[0] - self._mean(lam[0])) / self.phi
        hess = -self._var(lam[0]) / (self.phi * self.phi)
        return SignalDerivatives(gradient=np.array([grad]), hessian=np.array([[hess]]))


class Gaussian(ObservationModel):
    """Linear-Gaussian response ``y ~ N(lam, cov)`` with known covariance.

    The nuisance matrix is ``cov`` and the response function is the identity.
    The log-likelihood drops ``-0.5 * log|2 pi cov|``::

        l(y | lam) = -0.5 (y - lam)' cov^{-1} (y - lam)

    Parameters
    ----------
    cov : float or array_like of shape (d, d)
        Observation noise covariance. A scalar gives the univariate model.
    """

    name = "gaussian"

    def __init__(self, cov=1.0):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("Gaussian covariance must be square")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("Gaussian covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            self._factor = cho_factor(cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Gaussian covariance must be positive definite") from exc
        self._cov = _frozen(cov)
        self.response_dim = self.signal_dim = cov.shape[0]

    @property
    def nuisance(self) -> np.ndarray:
        return self._cov

    def _nuisance_solve(self, b):
        return cho_solve(self._factor, b)

    def log_likelihood(self, y, lam) -> float:
        r = self.check_response(y) - self.check_signal(lam)
        return float(-0.5 * r @ cho_solve(self._factor, r))

    def _response_mean(self, lam):
        return lam.copy()

    def _response_mean_batch(self, lams):
        return lams.copy()

    def _response_cov(self, lam):
        return self._cov.copy()

    def log_partition(self, eta) -> float:
        eta = self.check_signal(eta)
        return float(0.5 * eta @ cho_solve(self._factor, eta))

    def signal_derivatives(self, y, lam) -> SignalDerivatives:
        r = self.check_response(y) - self.check_signal(lam)
        if self.response_dim == 1:
            s2 = self._cov[0, 0]
            return SignalDerivatives(gradient=r / s2, hessian=np.array([[-1.0 / s2]]))
        precision = cho_solve(self._factor, np.eye(self.response_dim))
        precision = 0.5 * (precision + precision.T)
        return SignalDerivatives(gradient=cho_solve(self._factor, r), hessian=-precision)

    def __repr__(self) -> str:
        if self.response_dim == 1:
            return f"Gaussian(cov={self._cov[0, 0]!r})"
        return f"Gaussian(cov=<{self.response_dim}x{self.response_dim}>)"


class Poisson(_ScalarModel):
    """Poisson counts with rate ``exp(lam)``.

    ``l(y | lam) = y lam - exp(lam)``; the ``-log(y!)`` term is dropped.
    Signals above ``POISSON_MAX_SIGNAL`` saturate the rate.
    """

    name = "poisson"

    @staticmethod
    def _rate(lam):
        return np.exp(np.minimum(lam, POISSON_MAX_SIGNAL))

    def _check_response_domain(self, y):
        if y[0] < 0 or y[0] != np.floor(y[0]):
            raise DomainError(f"Poisson response must be a non-negative integer, got {y[0]}")

    def _mean(self, lam):
        return self._rate(lam)

    _var = _mean

    def _loglik(self, y, lam):
        return y * lam - self._rate(lam)

    def _b(self, eta):
        return self._rate(eta)


class Exponential(_ScalarModel):
    """Exponential waiting times with mean ``1 / lam``.

    ``l(y | lam) = -y lam + log(lam)``, nothing dropped. The nuisance is
    ``phi = -1`` so the mean update moves against the error. Signals below
    ``EXPONENTIAL_MIN_SIGNAL`` raise :class:`DomainError`.
    """

    name = "exponential"
    phi = -1.0

    def _check_signal_domain(self, lam):
        if np.any(lam[..., 0] < EXPONENTIAL_MIN_SIGNAL):
            raise DomainError(
                f"exponential model needs signal >= {EXPONENTIAL_MIN_SIGNAL}, got {lam[..., 0]}"
            )

    def _check_response_domain(self, y):
        if y[0] < 0:
            raise DomainError(f"exponential response must be non-negative, got {y[0]}")

    def clamp_signal(self, lam):
        lam = np.asarray(lam, dtype=float).reshape(1)
        if lam[0] < EXPONENTIAL_CLAMP:
            return np.array([EXPONENTIAL_CLAMP]), True
        return lam, False

    def _mean(self, lam):
        return 1.0 / lam

    def _var(self, lam):
        return 1.0 / (lam * lam)

    def _loglik(self, y, lam):
        return -y * lam + np.log(lam)

    def _b(self, eta):
        return -np.log(eta)


class BernoulliLogit(_ScalarModel):
    """Binary response with success probability ``sigmoid(lam)``.

    ``l(y | lam) = y lam + log(1 - sigmoid(lam))``, nothing dropped.
    """

    name = "bernoulli_logit"

    def _check_response_domain(self, y):
        if y[0] not in (0.0, 1.0):
            raise DomainError(f"Bernoulli response must be 0 or 1, got {y[0]}")

    def _mean(self, lam):
        return expit(lam)

    def _var(self, lam):
        # p (1 - p) without cancellation for large |lam|; the product rounds
        # one ulp above 1/4 near lam = 0
        return np.minimum(expit(lam) * expit(-lam), 0.25)

    def _loglik(self, y, lam):
        return y * lam + log_expit(-lam)

    def _b(self, eta):
        return float(np.logaddexp(0.0, eta))


class Product(ObservationModel):
    """Response made of conditionally independent parts.

    Part ``i`` reads the signal entries ``signal_slices[i]`` and produces the
    next ``parts[i].response_dim`` response entries. The log-likelihood is the
    sum over parts; nuisance, response covariance and Hessian are
    block-diagonal in the sliced coordinates.

    Parameters
    ----------
    parts : sequence of ObservationModel
    signal_slices : sequence of sequence of int, optional
        Signal indices used by each part. Defaults to consecutive blocks of
        each part's ``signal_dim``. Slices must partition the signal.
    """

    name = "product"

    def __init__(self, parts: Sequence[ObservationModel], signal_slices=None):
        parts = tuple(parts)
        if not parts:
            raise ValueError("product model needs at least one part")
        if signal_slices is None:
            signal_slices, start = [], 0
            for p in parts:
                signal_slices.append(range(start, start + p.signal_dim))
                start += p.signal_dim
        if len(signal_slices) != len(parts):
            raise ValueError("one signal slice is required per part")
        slices = []
        for p, s in zip(parts, signal_slices):
            idx = np.asarray(list(s), dtype=int)
            if idx.size != p.signal_dim:
                raise ValueError(
                    f"slice {list(idx)} has {idx.size} entries, part {p!r} needs {p.signal_dim}"
                )
            slices.append(_frozen(idx))
        flat = np.concatenate(slices)
        total = flat.size
        if np.unique(flat).size != total:
            raise ValueError("signal slices overlap")
        if flat.min() != 0 or flat.max() != total - 1:
            raise ValueError("signal slices do not cover the signal")

        self.parts = parts
        self.signal_slices = tuple(slices)
        self.signal_dim = total
        self.response_dim = sum(p.response_dim for p in parts)
        bounds = np.cumsum([0] + [p.response_dim for p in parts])
        self._response_slices = tuple(slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]))
        ordered = np.array_equal(flat, np.arange(total))
        self.canonical = ordered and all(p.canonical for p in parts)
        self._nuisance = _frozen(block_diag(*[p.nuisance for p in parts]))

    @property
    def nuisance(self) -> np.ndarray:
        return self._nuisance

    def _check_response_domain(self, y):
        for p, rs in zip(self.parts, self._response_slices):
            p._check_response_domain(y[rs])

    def _check_signal_domain(self, lam):
        for p, ss in zip(self.parts, self.signal_slices):
            p._check_signal_domain(lam[..., ss])

    def log_likelihood(self, y, lam) -> float:
        y = np.asarray(y, dtype=float).reshape(-1)
        lam = np.asarray(lam, dtype=float).reshape(-1)
        self._check_shapes(y, lam)
        return float(
            sum(
                p.log_likelihood(y[rs], lam[ss])
                for p, rs, ss in zip(self.parts, self._response_slices, self.signal_slices)
            )
        )

    def _response_mean(self, lam):
        return np.concatenate([p._response_mean(lam[ss]) for p, ss in zip(self.parts, self.signal_slices)])

    def _response_cov(self, lam):
        return block_diag(*[p._response_cov(lam[ss]) for p, ss in zip(self.parts, self.signal_slices)])

    def _response_mean_batch(self, lams):
        return np.hstack([p._response_mean_batch(lams[:, ss]) for p, ss in zip(self.parts, self.signal_slices)])

    def log_partition(self, eta) -> float:
        if not self.canonical:
            raise NotImplementedError("log_partition needs an in-order canonical product")
        eta = np.asarray(eta, dtype=float).reshape(-1)
        self._check_shapes(None, eta)
        return float(sum(p.log_partition(eta[ss]) for p, ss in zip(self.parts, self.signal_slices)))

    def signal_derivatives(self, y, lam) -> SignalDerivatives:
        y = np.asarray(y, dtype=float).reshape(-1)
        lam = np.asarray(lam, dtype=float).reshape(-1)
        self._check_shapes(y, lam)
        grad = np.zeros(self.signal_dim)
        hess = np.zeros((self.signal_dim, self.signal_dim))
        for p, rs, ss in zip(self.parts, self._response_slices, self.signal_slices):
            d = p.signal_derivatives(y[rs], lam[ss])
            grad[ss] = d.gradient
            hess[np.ix_(ss, ss)] = d.hessian
        return SignalDerivatives(gradient=grad, hessian=hess)

    def clamp_signal(self, lam):
        lam = np.array(lam, dtype=float).reshape(self.signal_dim)
        changed = False
        for p, ss in zip(self.parts, self.signal_slices):
            lam[ss], c = p.clamp_signal(lam[ss])
            changed |= c
        return lam, changed

    def _check_shapes(self, y, lam):
        if lam.shape != (self.signal_dim,):
            raise ValueError(f"signal has {lam.size} entries, model expects {self.signal_dim}")
        if y is not None and y.shape != (self.response_dim,):
            raise ValueError(f"response has {y.size} entries, model expects {self.response_dim}")

    def __repr__(self) -> str:
        return f"Product([{', '.join(map(repr, self.parts))}])"


def product_model(parts: Sequence[ObservationModel], signal_slices=None) -> Product:
    """Combine independent observation models into one composite model."""
    return Product(parts, signal_slices)


MODEL_NAMES = {
    "gaussian": Gaussian,
    "poisson": Poisson,
    "exponential": Exponential,
    "bernoulli_logit": BernoulliLogit,
    "product": product_model,
}


def make_model(name: str, *args, **kwargs) -> ObservationModel:
    """Build a model from its registered name, e.g. ``make_model("gaussian", 2.0)``."""
    try:
        factory = MODEL_NAMES[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_NAMES)}") from None
    return factory(*args, **kwargs)


def log_likelihood(model: ObservationModel, y, lam) -> float:
    return model.log_likelihood(y, lam)


def response_mean(model: ObservationModel, lam) -> np.ndarray:
    return model.response_mean(lam)


def response_cov(model: ObservationModel, lam) -> np.ndarray:
    return model.response_cov(lam)


def signal_derivatives(model: ObservationModel, y, lam) -> SignalDerivatives:
    return model.signal_derivatives(y, lam)
