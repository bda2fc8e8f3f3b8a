"""Numerical self-tests: finite differences, Lyapunov/Riccati residuals and
the uniform-stability and unimodality properties."""

from __future__ import annotations

import numpy as np

from .model import InnovationModel, StateSpaceModel
from .pem import asymptotic_eval, empirical_uniform_convergence
from .riccati import dare_residual, solve_dare
from .stability import (membership, sample_feasible_gain, solve_dlyap, stability_bounds,
                        verify_uniform_stability)


def fd_gradient(f, L, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``L``.

    Step ``h = rel_step * max(1, |L_ij|)``.
    """
    L = np.asarray(L, dtype=float)
    out = np.empty_like(L)
    for idx in np.ndindex(L.shape):
        h = rel_step * max(1.0, abs(L[idx]))
        Lp, Lm = L.copy(), L.copy()
        Lp[idx] += h
        Lm[idx] -= h
        out[idx] = (f(Lp) - f(Lm)) / (2 * h)
    return out


def relative_error(analytic, reference, floor: float = 1e-6) -> float:
    analytic, reference = np.asarray(analytic), np.asarray(reference)
    return float(np.linalg.norm(analytic - reference) / max(np.linalg.norm(reference), floor))


def count_inversions(seq) -> int:
    """Number of consecutive pairs that fail to decrease."""
    return sum(1 for a, b in zip(seq, seq[1:]) if not b < a)


def random_stable_matrix(n: int, rho: float, rng) -> np.ndarray:
    M = rng.standard_normal((n, n))
    return M * (rho / np.abs(np.linalg.eigvals(M)).max())


def dlyap_series(M, Q, terms: int = 200) -> np.ndarray:
    P = np.zeros_like(Q)
    Mi = np.eye(len(M))
    for _ in range(terms + 1):
        P += Mi @ Q @ Mi.T
        Mi = Mi @ M
    return P


def check_dlyap(rng, trials: int = 20):
    worst_res, worst_series = 0.0, 0.0
    for _ in range(trials):
        M = random_stable_matrix(3, 0.8, rng)
        G = rng.standard_normal((3, 3))
        Q = G @ G.T
        P = solve_dlyap(M, Q)
        worst_res = max(worst_res, np.linalg.norm(P - M @ P @ M.T - Q) / max(1.0, np.linalg.norm(P)))
        worst_series = max(worst_series, np.abs(P - dlyap_series(M, Q)).max())
    return worst_res, worst_series


def min_constraint(plant: StateSpaceModel, alpha: float, starts: int = 5, seed: int = 0) -> float:
    """Smallest value of ``g`` found by local descent from a few DARE gains.

    A positive result means the feasible set at this ``alpha`` is (numerically) empty.
    """
    from scipy.optimize import minimize

    from .stability import constraint_value_grad, spectral_radius

    def f(x):
        L = x.reshape(plant.n, plant.q)
        if spectral_radius(plant.closed_loop(L)) >= 1 - 1e-9:
            return np.inf, np.zeros_like(x)
        g, dg = constraint_value_grad(L, plant, alpha)
        return g, dg.ravel()

    best = np.inf
    for ss in np.random.SeedSequence([seed, 99]).spawn(starts):
        # any stable gain works as a start; alpha only scales g
        L0 = sample_feasible_gain(plant, 1e-6, ss)
        res = minimize(f, L0.ravel(), jac=True, method="BFGS", options={"gtol": 1e-10})
        best = min(best, float(res.fun))
    return best


def check_uniform_stability(plant: StateSpaceModel, alphas, n_gains: int, seed: int, i_max: int = 500):
    """Test the (gamma, lambda) bound on gains sampled from each feasible set.

    Returns one dict per ``alpha`` with the number of sampled gains, the
    violation count and whether the set is empty (``min g > 0``).
    """
    out = []
    for j, alpha in enumerate(alphas):
        gamma, lam = stability_bounds(alpha)
        row = {"alpha": alpha, "sampled": 0, "violations": 0, "empty": min_constraint(plant, alpha) > 0}
        if row["empty"]:
            out.append(row)
            continue
        for ss in np.random.SeedSequence([seed, j]).spawn(n_gains):
            L = sample_feasible_gain(plant, alpha, ss)
            row["sampled"] += 1
            if not verify_uniform_stability(L, plant, gamma, lam, i_max):
                row["violations"] += 1
        out.append(row)
    return out


def feasible_box(plant: StateSpaceModel, alpha: float, resolution: int = 201):
    """Bounding box ``(lo, hi)`` of the feasible set of a two-parameter gain, padded by one scan cell."""
    from .stability import gain_box

    if plant.n * plant.q != 2:
        raise ValueError("feasible_box supports two-parameter gains only")
    half = gain_box(plant, alpha)
    xs = np.linspace(-half, half, resolution)
    cell = xs[1] - xs[0]
    pts = [(a, b) for a in xs for b in xs if membership(np.array([a, b]).reshape(plant.n, plant.q), plant, alpha)]
    pts = np.array(pts)
    return pts.min(axis=0) - cell, pts.max(axis=0) + cell


def gain_grid(lo, hi, points: int, shape):
    """Tensor grid of two-parameter gains, flattened in row-major order."""
    a = np.linspace(lo[0], hi[0], points)
    b = np.linspace(lo[1], hi[1], points)
    AA, BB = np.meshgrid(a, b, indexing="ij")
    return np.stack([AA.ravel(), BB.ravel()], axis=1).reshape(-1, *shape), (a, b)


def unimodality_grid(model: InnovationModel, alpha: float, points: int = 50, radius: float = 0.05, W=None):
    """Min ``||grad Vbar||`` over a feasible grid outside a ball around ``L*``, and ``||grad Vbar(L*)||``."""
    plant = model.plant
    lo, hi = feasible_box(plant, alpha)
    grid, _ = gain_grid(lo, hi, points, (plant.n, plant.q))
    norms = []
    for L in grid:
        if np.linalg.norm(L - model.L_star) <= radius or not membership(L, plant, alpha):
            continue
        norms.append(np.linalg.norm(asymptotic_eval(L, model, W).grad_V_bar))
    at_truth = float(np.linalg.norm(asymptotic_eval(model.L_star, model, W).grad_V_bar))
    return float(min(norms)), at_truth, len(norms)


def uniform_convergence_table(model: InnovationModel, grid, N_list, seeds, W=None):
    return empirical_uniform_convergence(model, W, grid, N_list, seeds)


def golden_ratio_dare():
    sol = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    return float(sol.Sigma[0, 0]), dare_residual(sol.Sigma, np.eye(1), np.eye(1), np.eye(1), np.eye(1))
