"""Ridge reconstruction of spatial features from a gallery dictionary."""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from sfr.errors import DimensionMismatchError, FactorizationError
from sfr.features import as_columns

logger = logging.getLogger(__name__)

DEFAULT_BETA = 1e-3
# relative pivot floor below which an unregularized gram matrix counts as singular
PIVOT_FLOOR = 1e-14


@dataclass(frozen=True, eq=False)
class ReconstructionCoefficients:
    matrix: np.ndarray
    beta: float


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    coefficients: ReconstructionCoefficients
    residual: np.ndarray
    distance: float


@dataclass(frozen=True, eq=False)
class DictionaryFactor:
    dictionary: np.ndarray
    factor: tuple
    beta: float

    @property
    def dim(self):
        return self.dictionary.shape[0]


def _coefficient_matrix(w):
    if isinstance(w, ReconstructionCoefficients):
        return w.matrix
    return as_columns(w)


def _check_dims(x, y):
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatchError(f'feature dims differ: X has {x.shape[0]}, Y has {y.shape[0]}')


def factorize_dictionary(Y, beta=DEFAULT_BETA):
    if beta < 0:
        raise ValueError(f'beta must be nonnegative, got {beta}')
    y = as_columns(Y)
    gram = y.T @ y
    gram[np.diag_indices_from(gram)] += beta

    try:
        c, lower = cho_factor(gram, lower=True, check_finite=False)
    except LinAlgError:
        raise FactorizationError(f'Y^T Y + {beta} I is not positive definite '
                                 f'(condition {np.linalg.cond(gram):.3e})',
                                 condition=np.linalg.cond(gram)) from None

    pivots = np.abs(np.diag(c))
    if beta == 0 and pivots.min() ** 2 <= PIVOT_FLOOR * pivots.max() ** 2:
        condition = np.linalg.cond(gram)
        raise FactorizationError(f'Y^T Y is numerically singular (condition {condition:.3e}); use beta > 0',
                                 condition=condition)

    y = np.array(y)
    y.setflags(write=False)
    return DictionaryFactor(y, (c, lower), float(beta))


def solve_with_factor(factor, X):
    x = as_columns(X)
    _check_dims(x, factor.dictionary)
    return cho_solve(factor.factor, factor.dictionary.T @ x, check_finite=False)


def solve_coefficients(X, Y, beta=DEFAULT_BETA):
    x, y = as_columns(X), as_columns(Y)
    _check_dims(x, y)
    factor = factorize_dictionary(y, beta)
    return ReconstructionCoefficients(solve_with_factor(factor, x), float(beta))


def _mean_column_norm(residual):
    return float(np.mean(np.linalg.norm(residual, axis=0)))


def sfr_distance(X, Y, beta=DEFAULT_BETA):
    x, y = as_columns(X), as_columns(Y)
    coefficients = solve_coefficients(x, y, beta)
    residual = x - y @ coefficients.matrix
    return ReconstructionResult(coefficients, residual, _mean_column_norm(residual))


def sfr_distance_with_factor(X, factor):
    x = as_columns(X)
    w = solve_with_factor(factor, x)
    return _mean_column_norm(x - factor.dictionary @ w)


def sfr_gradients(Xa, Xo, W):
    """Gradients of ||Xa - Xo W||_F^2 with W held fixed."""
    xa, xo = as_columns(Xa), as_columns(Xo)
    w = _coefficient_matrix(W)
    _check_dims(xa, xo)
    if w.shape != (xo.shape[1], xa.shape[1]):
        raise DimensionMismatchError(f'W has shape {w.shape}, expected {(xo.shape[1], xa.shape[1])}')

    residual = xa - xo @ w
    return 2 * residual, -2 * residual @ w.T


def reconstruction_objective(X, Y, W, beta=DEFAULT_BETA):
    x, y = as_columns(X), as_columns(Y)
    w = _coefficient_matrix(W)
    _check_dims(x, y)
    if w.shape != (y.shape[1], x.shape[1]):
        raise DimensionMismatchError(f'W has shape {w.shape}, expected {(y.shape[1], x.shape[1])}')

    residual = x - y @ w
    return float(np.sum(residual ** 2) + beta * np.sum(w ** 2))
