"""Steady-state Kalman predictor from physical noise covariances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NonConvergenceError
from .model import InnovationModel, StateSpaceModel


@dataclass
class DareSolution:
    Sigma: np.ndarray
    L_star: np.ndarray
    S_star: np.ndarray
    iterations: int = 0


def riccati_map(Sigma, A, C, Q, R):
    """One step of the prediction-covariance Riccati recursion."""
    Sigma, A, C, Q, R = (np.atleast_2d(np.asarray(X, dtype=float)) for X in (Sigma, A, C, Q, R))
    S = C @ Sigma @ C.T + R
    K = A @ Sigma @ C.T
    nxt = A @ Sigma @ A.T + Q - K @ np.linalg.solve(S, K.T)
    return 0.5 * (nxt + nxt.T)


def dare_residual(Sigma, A, C, Q, R) -> float:
    """Relative fixed-point residual of ``Sigma``."""
    return float(np.linalg.norm(riccati_map(Sigma, A, C, Q, R) - Sigma) / max(1.0, np.linalg.norm(Sigma)))


def solve_dare(A, C, Q_proc, R, tol: float = 1e-13, max_iter: int = 1_000_000) -> DareSolution:
    """Solve the filtering DARE by fixed-point iteration from ``Sigma_0 = Q_proc``.

    Returns the prediction error covariance, the predictor gain
    ``L = A Sigma C^T S^-1`` and the innovation covariance
    ``S = C Sigma C^T + R``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Q = np.atleast_2d(np.asarray(Q_proc, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise ValueError("R must be positive definite")
    Sigma = 0.5 * (Q + Q.T)
    for it in range(1, max_iter + 1):
        nxt = riccati_map(Sigma, A, C, Q, R)
        if not np.isfinite(nxt).all():
            raise NonConvergenceError("Riccati iteration diverged")
        done = np.linalg.norm(nxt - Sigma) <= tol * max(1.0, np.linalg.norm(Sigma))
        Sigma = nxt
        if done:
            break
    else:
        raise NonConvergenceError(f"Riccati iteration did not converge in {max_iter} iterations")
    S = C @ Sigma @ C.T + R
    S = 0.5 * (S + S.T)
    if np.linalg.eigvalsh(S).min() <= 0:
        raise NonConvergenceError("innovation covariance is singular")
    L = np.linalg.solve(S, C @ Sigma @ A.T).T
    return DareSolution(Sigma, L, S, it)


def to_innovation_form(plant: StateSpaceModel, Q_proc, R) -> InnovationModel:
    """Wrap a physical model as an innovation-form model using the DARE gain."""
    sol = solve_dare(plant.A, plant.C, Q_proc, R)
    return InnovationModel(plant, sol.L_star, sol.S_star)
