"""Sparse ODE discovery by trajectory integration with L1-penalised coefficients.

The main entry points are :func:`odenet.train.train` (fit a sparse
polynomial ODE to time series), :func:`odenet.sindy.sindy_fit` (the
derivative-regression baseline) and the ``odenet`` command line.
"""

from .basis import PolynomialBasis, build_basis
from .data import Dataset, Trajectory
from .integrate import IntegratorConfig, TimeGrid, integrate
from .model import CoefficientMatrix, ODEModel
from .train import FittedModel, TrainConfig, train

__all__ = [
    "CoefficientMatrix",
    "Dataset",
    "FittedModel",
    "IntegratorConfig",
    "ODEModel",
    "PolynomialBasis",
    "TimeGrid",
    "TrainConfig",
    "Trajectory",
    "build_basis",
    "integrate",
    "train",
]

__version__ = "0.1.0"
