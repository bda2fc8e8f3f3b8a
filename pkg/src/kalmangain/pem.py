"""Prediction-error and likelihood objectives for the predictor gain.

``V_N(L) = (1/N) sum_{k=1..N} ||y_k - C xhat_k(L)||_W^2`` with analytic
gradient and Gauss-Newton curvature from forward sensitivities, its
asymptotic limit ``Vbar(L)`` in closed form, and the joint likelihood
objective over ``(beta, L, S)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .exceptions import DimensionError, NonFiniteTrajectoryError, SingularRegressionError
from .model import (Dataset, ExtendedData, InnovationModel, NoiseSpec, StateSpaceModel,
                    predict_states, predict_states_extended, simulate_innovation)
from .stability import solve_dlyap, spectral_radius


@dataclass
class PemEval:
    value: float
    gradient: np.ndarray
    gn_hessian: np.ndarray
    residuals: np.ndarray


@dataclass
class AsymptoticEval:
    Sigma_bar: np.ndarray
    V_bar: float
    grad_V_bar: np.ndarray
    D: np.ndarray
    Lam_W: np.ndarray


@dataclass
class MleParams:
    beta: np.ndarray
    L: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.L = np.atleast_2d(np.asarray(self.L, dtype=float))
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if np.linalg.eigvalsh(0.5 * (self.S + self.S.T)).min() <= 1e-12:
            raise ValueError("S must be positive definite")


def _weight(W, q: int) -> np.ndarray:
    W = np.eye(q) if W is None else np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape != (q, q):
        raise DimensionError(f"W must be {q} x {q}, got {W.shape}")
    return W


def pem_value(L, plant: StateSpaceModel, data: Dataset, W=None) -> float:
    """Weighted mean squared one-step prediction error over k = 1..N."""
    W = _weight(W, plant.q)
    _, r = predict_states(plant, L, data)
    r = r[1:]
    return float(np.einsum("ki,ij,kj->", r, W, r) / len(r))


@numba.njit(cache=True)
def _sweep_kernel(Ls, A, C, bu, y, x0, W, order):
    G, n, q = Ls.shape
    nq = n * q
    N = y.shape[0] - 1
    values = np.zeros(G)
    grads = np.zeros((G, nq))
    hess = np.zeros((G, nq, nq))
    WC = W @ C
    x = np.empty(n)
    xn = np.empty(n)
    r = np.empty(q)
    S = np.empty((n, nq))
    Sn = np.empty((n, nq))
    CS = np.empty((q, nq))
    M = np.empty((n, n))
    for g in range(G):
        L = Ls[g]
        for a in range(n):
            for b in range(n):
                acc = A[a, b]
                for j in range(q):
                    acc -= L[a, j] * C[j, b]
                M[a, b] = acc
        x[:] = x0
        S[:, :] = 0.0
        val = 0.0
        for k in range(N + 1):
            for i in range(q):
                acc = y[k, i]
                for b in range(n):
                    acc -= C[i, b] * x[b]
                r[i] = acc
            if k >= 1:
                for i in range(q):
                    for j in range(q):
                        val += r[i] * W[i, j] * r[j]
                if order >= 1:
                    # d||r||_W^2 / dtheta = -2 r^T W C S
                    for p in range(nq):
                        acc = 0.0
                        for i in range(q):
                            for b in range(n):
                                acc += r[i] * WC[i, b] * S[b, p]
                        grads[g, p] -= acc
                if order >= 2:
                    for i in range(q):
                        for p in range(nq):
                            acc = 0.0
                            for b in range(n):
                                acc += C[i, b] * S[b, p]
                            CS[i, p] = acc
                    for p in range(nq):
                        for s in range(p, nq):
                            acc = 0.0
                            for i in range(q):
                                for j in range(q):
                                    acc += CS[i, p] * W[i, j] * CS[j, s]
                            hess[g, p, s] += acc
            if order >= 1:
                for a in range(n):
                    for p in range(nq):
                        acc = 0.0
                        for b in range(n):
                            acc += M[a, b] * S[b, p]
                        Sn[a, p] = acc
                for a in range(n):
                    for j in range(q):
                        Sn[a, a * q + j] += r[j]
                S[:, :] = Sn
            for a in range(n):
                acc = bu[k, a]
                for b in range(n):
                    acc += A[a, b] * x[b]
                for j in range(q):
                    acc += L[a, j] * r[j]
                xn[a] = acc
            x[:] = xn
        values[g] = val
        for p in range(nq):
            for s in range(p + 1, nq):
                hess[g, s, p] = hess[g, p, s]
    return values, grads, hess


def sweep(Ls, plant: StateSpaceModel, data: Dataset, W=None, order: int = 1):
    """Evaluate ``V_N`` at a batch of gains in a single pass per gain.

    ``Ls`` has shape ``(G, n, q)``. Returns ``values`` of shape ``(G,)``,
    plus ``grads`` ``(G, n, q)`` when ``order >= 1`` and Gauss-Newton
    Hessians ``(G, nq, nq)`` when ``order >= 2``. Gains whose predictor
    overflows get ``inf`` values and ``nan`` derivatives.

    Sensitivities ``s_k = d xhat_k / d L_ij`` obey
    ``s_{k+1} = (A - LC) s_k + E_ij r_k`` with ``s_0 = 0``; parameters are
    ordered as ``L.ravel()``.
    """
    W = _weight(W, plant.q)
    n, q = plant.n, plant.q
    Ls = np.ascontiguousarray(np.asarray(Ls, dtype=float).reshape(-1, n, q))
    G = len(Ls)
    if data.y.shape[1] != q or data.u.shape[1] != plant.p:
        raise DimensionError("dataset dimensions do not match the plant")
    bu = np.ascontiguousarray(data.u @ plant.B.T)
    with np.errstate(over="ignore", invalid="ignore"):
        values, grads, hess = _sweep_kernel(Ls, plant.A, plant.C, bu, np.ascontiguousarray(data.y),
                                            plant.x0, W, order)
    N = data.N
    values /= N
    bad = ~np.isfinite(values)
    values[bad] = np.inf
    if order < 1:
        return values
    grads *= 2.0 / N
    grads[bad] = np.nan
    if order < 2:
        return values, grads.reshape(G, n, q)
    hess *= 2.0 / N
    hess[bad] = np.nan
    return values, grads.reshape(G, n, q), hess


def pem_eval(L, plant: StateSpaceModel, data: Dataset, W=None) -> PemEval:
    """Value, gradient and Gauss-Newton Hessian of ``V_N`` at ``L``."""
    L = plant.check_gain(L)
    values, grads, hess = sweep(L[None], plant, data, W, order=2)
    if not np.isfinite(values[0]):
        raise NonFiniteTrajectoryError("predictor diverged")
    _, r = predict_states(plant, L, data)
    H = 0.5 * (hess[0] + hess[0].T)
    return PemEval(float(values[0]), grads[0], H, r)


def asymptotic_eval(L, model: InnovationModel, W=None) -> AsymptoticEval:
    """Limit objective ``Vbar(L)`` and its gradient.

    ``Sigma_bar`` solves ``Sigma = M Sigma M^T + (L - L*) S* (L - L*)^T``
    with ``M = A - LC``. The gradient is ``2 Lam_W D`` where
    ``D = (L - L*) S* - M Sigma_bar C^T`` and ``Lam_W = M^T Lam_W M + C^T W C``.
    """
    plant = model.plant
    L = plant.check_gain(L)
    W = _weight(W, plant.q)
    M = plant.closed_loop(L)
    dL = L - model.L_star
    Sigma = solve_dlyap(M, dL @ model.S_star @ dL.T)
    C = plant.C
    V = float(np.trace(W @ (model.S_star + C @ Sigma @ C.T)))
    D = dL @ model.S_star - M @ Sigma @ C.T
    Lam = solve_dlyap(M.T, C.T @ W @ C)
    return AsymptoticEval(Sigma, V, 2.0 * Lam @ D, D, Lam)


def asymptotic_values(Ls, model: InnovationModel, W=None) -> np.ndarray:
    """``Vbar`` over a batch of gains; ``inf`` where ``A - LC`` is unstable."""
    out = []
    for L in np.asarray(Ls, dtype=float).reshape(-1, model.plant.n, model.plant.q):
        if spectral_radius(model.plant.closed_loop(L)) >= 1 - 1e-12:
            out.append(np.inf)
        else:
            out.append(asymptotic_eval(L, model, W).V_bar)
    return np.array(out)


def sigma_bar_direction(L, model: InnovationModel, D) -> np.ndarray:
    """Directional derivative of ``Sigma_bar`` at ``L`` along ``D``.

    Solves ``Sdot = M Sdot M^T + D Dbar^T + Dbar D^T`` where ``Dbar`` is the
    ``D`` matrix of :func:`asymptotic_eval`; along ``D = Dbar`` the forcing
    is ``2 D D^T``.
    """
    ev = asymptotic_eval(L, model)
    M = model.plant.closed_loop(L)
    D = np.asarray(D, dtype=float).reshape(ev.D.shape)
    return solve_dlyap(M, D @ ev.D.T + ev.D @ D.T)


def empirical_uniform_convergence(model: InnovationModel, W, grid, N_list, seeds, inputs=None):
    """Seed-averaged sup-norm gaps between ``V_N`` and ``Vbar`` over a gain grid.

    Innovations are Gaussian with covariance ``S*``. Each seed generates one
    record of length ``max(N_list)`` and shorter lengths use its prefix.
    Returns a list of dicts with keys ``N``, ``sup_value_gap`` and
    ``sup_grad_gap``.
    """
    plant = model.plant
    grid = np.asarray(grid, dtype=float).reshape(-1, plant.n, plant.q)
    N_list = sorted(int(N) for N in N_list)
    Vbar = np.empty(len(grid))
    gbar = np.empty_like(grid)
    for i, L in enumerate(grid):
        ev = asymptotic_eval(L, model, W)
        Vbar[i], gbar[i] = ev.V_bar, ev.grad_V_bar
    gaps = np.zeros((len(N_list), 2))
    seeds = list(seeds)
    for seed in seeds:
        u = np.zeros((N_list[-1] + 1, plant.p)) if inputs is None else inputs
        data, _ = simulate_innovation(model, u, NoiseSpec.gaussian(model.S_star, seed=seed))
        for j, N in enumerate(N_list):
            V, g = sweep(grid, plant, data.head(N), W, order=1)
            gaps[j, 0] += np.max(np.abs(V - Vbar))
            gaps[j, 1] += np.max(np.linalg.norm((g - gbar).reshape(len(grid), -1), axis=1))
    gaps /= len(seeds)
    return [{"N": N, "sup_value_gap": float(a), "sup_grad_gap": float(b)} for N, (a, b) in zip(N_list, gaps)]


def _residual_stats(r: np.ndarray, S: np.ndarray):
    Sinv = np.linalg.inv(S)
    r = r[1:]
    return float(np.einsum("ki,ij,kj->", r, Sinv, r) / len(r))


def mle_value(theta: MleParams, plant: StateSpaceModel, ext: ExtendedData) -> float:
    """Negative log-likelihood (up to constants): mean ``||r_k||^2_{S^-1}`` plus ``logdet S``."""
    S = theta.S
    if np.linalg.eigvalsh(0.5 * (S + S.T)).min() <= 1e-12:
        raise ValueError("S must be positive definite")
    _, r = predict_states_extended(plant, theta.beta, theta.L, ext)
    sign, logdet = np.linalg.slogdet(S)
    return _residual_stats(r, S) + float(logdet)


def beta_regressors(plant: StateSpaceModel, L, ext: ExtendedData) -> np.ndarray:
    """Sensitivities ``Psi_k = d xhat_k / d beta``, shape ``(N + 1, n, n_beta)``.

    ``Psi_{k+1} = (A - LC) Psi_k + Phi_k`` with ``Psi_0 = 0``; residuals are
    affine in beta: ``r_k(beta) = r_k(0) - C Psi_k beta``.
    """
    M = plant.closed_loop(L)
    Psi = np.zeros_like(ext.Phi)
    for k in range(ext.N):
        Psi[k + 1] = M @ Psi[k] + ext.Phi[k]
    return Psi


def beta_update(theta: MleParams, plant: StateSpaceModel, ext: ExtendedData) -> np.ndarray:
    """Weighted least-squares minimizer over beta with ``(L, S)`` fixed."""
    if not ext.n_beta:
        return np.zeros(0)
    _, r0 = predict_states_extended(plant, np.zeros(ext.n_beta), theta.L, ext)
    Psi = beta_regressors(plant, theta.L, ext)
    J = np.einsum("ij,kjb->kib", plant.C, Psi)[1:]
    # whiten with S^-1 = F^T F
    F = np.linalg.cholesky(np.linalg.inv(theta.S)).T
    X = np.einsum("ij,kjb->kib", F, J).reshape(-1, ext.n_beta)
    z = (r0[1:] @ F.T).reshape(-1)
    if np.linalg.matrix_rank(X) < ext.n_beta:
        raise SingularRegressionError("regressor stack is rank deficient")
    return np.linalg.lstsq(X, z, rcond=None)[0]


def covariance_update(theta: MleParams, plant: StateSpaceModel, ext: ExtendedData) -> np.ndarray:
    """Residual sample covariance at ``(beta, L)``, eigenvalues clamped to >= 1e-10."""
    if ext.N < plant.q:
        raise ValueError(f"need N >= q = {plant.q} samples for the covariance update")
    _, r = predict_states_extended(plant, theta.beta, theta.L, ext)
    r = r[1:]
    S = r.T @ r / len(r)
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    S = (V * np.maximum(w, 1e-10)) @ V.T
    return 0.5 * (S + S.T)


def mle_partial_updates(theta: MleParams, plant: StateSpaceModel, ext: ExtendedData):
    """Closed-form block updates ``(beta_new, S_new)`` of the likelihood objective.

    Both are computed from ``theta`` as given: ``beta_new`` minimizes over
    beta with ``(L, S)`` fixed and ``S_new`` minimizes over ``S`` with
    ``(beta, L)`` fixed.
    """
    return beta_update(theta, plant, ext), covariance_update(theta, plant, ext)
