"""Online mean and covariance estimation for regression models with drifting parameters."""

from .expfam import (
    BernoulliLogit,
    DomainError,
    Exponential,
    Gaussian,
    ObservationModel,
    Poisson,
    Product,
    SignalDerivatives,
    make_model,
    product_model,
)
from .filter import (
    FilteringError,
    Observation,
    UpdateDiagnostics,
    filter_stream,
    kalman_update,
    update,
    update_stable,
    update_univariate,
)
from .statespace import Belief, DynamicsSpec, PriorPrediction, SignalPrediction, predict, predict_signal

__version__ = "0.1.0"
