"""Tikhonov-regularized least squares via the normal equations."""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import SingularSystemError, ValidationError

DEFAULT_TIKHONOV = 1e-8


def solve_normal_equations(targets: np.ndarray,
                           regressors: np.ndarray,
                           tikhonov: float = DEFAULT_TIKHONOV) -> np.ndarray:
    """Least-squares ``M`` minimizing ``||targets - M @ regressors||_F``.

    Builds ``T = targets @ regressors.T`` and ``G = regressors @ regressors.T``
    and solves ``M (G + tikhonov I) = T``.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    regressors = np.atleast_2d(np.asarray(regressors, dtype=float))
    if targets.shape[1] != regressors.shape[1]:
        raise ValidationError(
            f"column counts differ: {targets.shape[1]} vs {regressors.shape[1]}")
    if tikhonov < 0:
        raise ValidationError("tikhonov must be non-negative")
    G = regressors @ regressors.T
    T = targets @ regressors.T
    G_reg = G + tikhonov * np.eye(G.shape[0])
    try:
        with np.errstate(all="raise"):
            M = linalg.solve(G_reg, T.T, assume_a="sym").T
    except (linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        raise SingularSystemError(
            "normal equations are singular even after regularization") from exc
    if not np.all(np.isfinite(M)):
        raise SingularSystemError("normal-equation solution is not finite")
    return M
