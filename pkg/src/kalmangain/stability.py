"""Discrete Lyapunov certificates and the stability-constrained gain set.

The feasible set is

    L_alpha = {L : P = (A - LC) P (A - LC)^T + I,  alpha * trace(P - I) <= 1}

and every member satisfies ``||(A - LC)^i|| <= gamma * lambda^i`` with
``gamma = sqrt(1 + 1/alpha)`` and ``lambda = 1 / sqrt(1 + alpha)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import FeasibleSampleExhausted, UnstableMatrixError
from .model import StateSpaceModel

STABILITY_MARGIN = 1e-12
FEASIBILITY_SLACK = 1e-12


@dataclass
class StabilityCert:
    P: np.ndarray
    alpha: float
    gamma: float
    lam: float


@dataclass
class Membership:
    feasible: bool
    P: Optional[np.ndarray] = None
    reason: str = ""
    constraint: float = np.inf

    def __bool__(self):
        return self.feasible


def spectral_radius(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return float(np.abs(np.linalg.eigvals(M)).max())


def solve_dlyap(M, Q) -> np.ndarray:
    """Solve ``P = M P M^T + Q`` for Schur-stable ``M``.

    Uses the Kronecker form ``(I - M kron M) vec(P) = vec(Q)``, which is
    cheap for the small state dimensions this package targets.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = M.shape[0]
    if spectral_radius(M) >= 1 - STABILITY_MARGIN:
        raise UnstableMatrixError(f"spectral radius {spectral_radius(M):.6g} >= 1")
    K = np.eye(n * n) - np.kron(M, M)
    P = np.linalg.solve(K, Q.reshape(-1)).reshape(n, n)
    return 0.5 * (P + P.T)


def membership(L, plant: StateSpaceModel, alpha: float) -> Membership:
    """Test whether ``L`` lies in the feasible set for level ``alpha``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    M = plant.closed_loop(L)
    rho = spectral_radius(M)
    if not np.isfinite(rho) or rho >= 1 - STABILITY_MARGIN:
        return Membership(False, reason="unstable")
    P = solve_dlyap(M, np.eye(plant.n))
    g = alpha * np.trace(P - np.eye(plant.n)) - 1.0
    if g > FEASIBILITY_SLACK:
        return Membership(False, P=P, reason="trace constraint violated", constraint=g)
    return Membership(True, P=P, constraint=g)


def constraint_value_grad(L, plant: StateSpaceModel, alpha: float):
    """Constraint ``g(L) = alpha * trace(P - I) - 1`` and its gradient w.r.t. ``L``.

    The gradient comes from the adjoint equation ``Lam = M^T Lam M + I``:
    ``dg/dL = -2 alpha Lam M P C^T``.
    """
    L = plant.check_gain(L)
    M = plant.closed_loop(L)
    eye = np.eye(plant.n)
    P = solve_dlyap(M, eye)
    Lam = solve_dlyap(M.T, eye)
    g = alpha * np.trace(P - eye) - 1.0
    grad = -2.0 * alpha * Lam @ M @ P @ plant.C.T
    return float(g), grad


def constraint_hessian(L, plant: StateSpaceModel, alpha: float) -> np.ndarray:
    """Hessian of ``g`` w.r.t. ``vec(L)`` (row-major), shape ``(nq, nq)``.

    With ``dM_a = -E_a C`` and first-order sensitivities
    ``dP_a = M dP_a M^T + dM_a P M^T + M P dM_a^T``, the second derivative is
    ``alpha * trace(Lam F_ab)`` where ``F_ab`` collects the cross terms of
    the twice-differentiated Lyapunov equation.
    """
    L = plant.check_gain(L)
    n, q = plant.n, plant.q
    M = plant.closed_loop(L)
    eye = np.eye(n)
    P = solve_dlyap(M, eye)
    Lam = solve_dlyap(M.T, eye)
    dMs, dPs = [], []
    for a in range(n * q):
        E = np.zeros((n, q))
        E.flat[a] = 1.0
        dM = -E @ plant.C
        F = dM @ P @ M.T
        dMs.append(dM)
        dPs.append(solve_dlyap(M, F + F.T))
    H = np.empty((n * q, n * q))
    for a in range(n * q):
        for b in range(a, n * q):
            T = dMs[a] @ dPs[b] @ M.T + dMs[b] @ dPs[a] @ M.T + dMs[a] @ P @ dMs[b].T
            H[a, b] = H[b, a] = alpha * np.trace(Lam @ (T + T.T))
    return H


def stability_bounds(alpha: float):
    """Uniform-stability constants ``(gamma, lambda)`` implied by level ``alpha``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return float(np.sqrt(1.0 + 1.0 / alpha)), float(1.0 / np.sqrt(1.0 + alpha))


def certificate(L, plant: StateSpaceModel, alpha: float) -> StabilityCert:
    m = membership(L, plant, alpha)
    if not m:
        raise UnstableMatrixError(f"gain is not in the feasible set: {m.reason}")
    gamma, lam = stability_bounds(alpha)
    return StabilityCert(m.P, alpha, gamma, lam)


def verify_uniform_stability(L, plant: StateSpaceModel, gamma: float, lam: float, i_max: int) -> bool:
    """Check ``||(A - LC)^i||_2 <= gamma * lam^i`` for ``i = 0..i_max``."""
    if i_max < 1:
        raise ValueError("i_max must be >= 1")
    M = plant.closed_loop(L)
    powers = np.empty((i_max + 1, plant.n, plant.n))
    powers[0] = np.eye(plant.n)
    for i in range(1, i_max + 1):
        powers[i] = powers[i - 1] @ M
    norms = np.linalg.norm(powers, ord=2, axis=(1, 2))
    bounds = gamma * lam ** np.arange(i_max + 1)
    # relative slack covers rounding in the matrix power
    return bool(np.all(norms <= bounds * (1 + 1e-9)))


def gain_box(plant: StateSpaceModel, alpha: float) -> float:
    """Half-width of a box containing every feasible gain.

    Uses ``||L C|| <= ||A|| + gamma`` and ``||L C|| >= sigma_min(C) ||L||``.
    """
    gamma, _ = stability_bounds(alpha)
    smin = np.linalg.svd(plant.C, compute_uv=False).min()
    return float((np.linalg.norm(plant.A, 2) + gamma) / smin)


def sample_feasible_gain(plant: StateSpaceModel, alpha: float, seed, method: str = "dare",
                         max_tries: int = 1000) -> np.ndarray:
    """Draw a gain from the feasible set.

    ``method="dare"`` returns steady-state Kalman gains for random
    ``Q = G G^T + 1e-6 I`` and ``R = H H^T + 1e-6 I``; ``method="uniform"``
    rejection-samples uniformly from the bounding box of the feasible set.
    Raises :class:`FeasibleSampleExhausted` after ``max_tries`` rejections.
    """
    from .riccati import solve_dare

    rng = np.random.default_rng(seed)
    n, q = plant.n, plant.q
    half = gain_box(plant, alpha) if method == "uniform" else None
    for _ in range(max_tries):
        if method == "dare":
            G = rng.standard_normal((n, n))
            H = rng.standard_normal((q, q))
            Q = G @ G.T + 1e-6 * np.eye(n)
            R = H @ H.T + 1e-6 * np.eye(q)
            L = solve_dare(plant.A, plant.C, Q, R).L_star
        elif method == "uniform":
            L = rng.uniform(-half, half, size=(n, q))
        else:
            raise ValueError(f"unknown sampling method {method!r}")
        if membership(L, plant, alpha):
            return L
    raise FeasibleSampleExhausted(f"no feasible gain found in {max_tries} draws (alpha = {alpha})")
