"""Ordinary least squares with an intercept."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from vo2fit.errors import DataError

log = logging.getLogger(__name__)


class RankDeficientWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LinearParams:
    coef: np.ndarray
    intercept: float

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, float) @ self.coef + self.intercept


def fit_linear(X, y) -> LinearParams:
    """Least-squares fit; rank-deficient designs get the minimum-norm solution."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) != len(y) or len(y) == 0:
        raise DataError(f"design has {len(X)} rows but target has {len(y)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("non-finite values in linear regression input")
    A = np.column_stack([np.ones(len(X)), X])
    sol, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < A.shape[1]:
        warnings.warn(f"design matrix rank {rank} < {A.shape[1]} columns; using pseudoinverse solution",
                      RankDeficientWarning, stacklevel=2)
    return LinearParams(coef=sol[1:], intercept=float(sol[0]))
