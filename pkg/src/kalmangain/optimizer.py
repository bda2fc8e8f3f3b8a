"""Stability-constrained PEM solver and drivers built on it.

The constrained problem ``min V_N(L)  s.t.  g(L) <= 0`` (``g`` from
:func:`~kalmangain.stability.constraint_value_grad`) is solved with a
log-barrier method: for a decreasing sequence of barrier weights ``mu`` the
function ``V_N(L) - mu log(-g(L))`` is minimized by damped Gauss-Newton
steps with an Armijo backtracking line search that never leaves the
feasible set. A final unbarriered refinement polishes interior solutions.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .exceptions import EmptyFeasibleGridError, InfeasibleStartError, KalmanGainError
from .model import Dataset, ExtendedData, StateSpaceModel
from .pem import MleParams, beta_update, covariance_update, mle_value, sweep
from .stability import (constraint_hessian, constraint_value_grad, membership, sample_feasible_gain,
                        spectral_radius)

logger = logging.getLogger(__name__)


@dataclass
class SolveOptions:
    """Tuning knobs of :func:`minimize_pem`.

    ``mu_b_init=None`` means ``1e-2 * max(1, V_N(L0))`` and ``tol_grad=None``
    means ``1e-8 * max(1, V_N(L))`` evaluated at the current iterate.
    """

    alpha: float = 0.02
    mu_b_init: Optional[float] = None
    mu_b_factor: float = 0.1
    mu_b_min: float = 1e-8
    tol_grad: Optional[float] = None
    max_iters: int = 500
    ls_c1: float = 1e-4
    ls_backtrack: float = 0.5
    max_backtracks: int = 50
    reg: float = 1e-8
    refine: bool = True
    record_path: bool = True

    def __post_init__(self):
        if not 0 < self.mu_b_factor < 1:
            raise ValueError("mu_b_factor must lie in (0, 1)")
        if not 0 < self.ls_backtrack < 1:
            raise ValueError("ls_backtrack must lie in (0, 1)")
        if self.tol_grad is not None and not self.tol_grad > 0:
            raise ValueError("tol_grad must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass
class FitResult:
    L_hat: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    barrier_levels: List[float]
    converged: bool
    constraint_slack: float
    multiplier: float = 0.0
    tol_grad: float = 0.0
    trace_path: Optional[List[np.ndarray]] = None
    # (barrier weight, barrier objective) after every accepted step
    history: List[tuple] = field(default_factory=list)
    message: str = ""


class _Problem:
    """Objective/constraint evaluations with the feasibility guard."""

    def __init__(self, plant, data, W, alpha):
        self.plant, self.data, self.W, self.alpha = plant, data, W, alpha
        self.n, self.q = plant.n, plant.q

    def feasible_constraint(self, L):
        M = self.plant.closed_loop(L)
        if not np.isfinite(M).all() or spectral_radius(M) >= 1 - 1e-9:
            return None
        g, dg = constraint_value_grad(L, self.plant, self.alpha)
        if not g < 0:
            return None
        return g, dg

    def value(self, L):
        return float(sweep(L[None], self.plant, self.data, self.W, order=0)[0])

    def full(self, L):
        v, grad, hess = sweep(L[None], self.plant, self.data, self.W, order=2)
        return float(v[0]), grad[0].reshape(-1), hess[0]

    def exact_hessian(self, L, H_gn):
        """Full Hessian of ``V_N`` by central differences of the analytic gradient.

        Falls back to ``H_gn`` if a probe point overflows.
        """
        nq = L.size
        h = 1e-6 * np.maximum(1.0, np.abs(L.reshape(-1)))
        probes = np.repeat(L.reshape(1, -1), 2 * nq, axis=0)
        probes[np.arange(nq), np.arange(nq)] += h
        probes[nq + np.arange(nq), np.arange(nq)] -= h
        _, grads = sweep(probes.reshape(-1, self.n, self.q), self.plant, self.data, self.W, order=1)
        grads = grads.reshape(2 * nq, nq)
        if not np.isfinite(grads).all():
            return H_gn
        H = (grads[:nq] - grads[nq:]) / (2 * h[:, None])
        return 0.5 * (H + H.T)


def kkt_residual(grad, dg):
    """``||grad + nu dg||`` with the least-squares multiplier ``nu >= 0``; returns ``(residual, nu)``."""
    dg = dg.reshape(-1)
    nu = max(0.0, -float(grad @ dg) / float(dg @ dg)) if np.any(dg) else 0.0
    return float(np.linalg.norm(grad + nu * dg)), nu


def _tol(opts: SolveOptions, value: float) -> float:
    return opts.tol_grad if opts.tol_grad is not None else 1e-8 * max(1.0, value)


def minimize_pem(plant: StateSpaceModel, data: Dataset, W, L0, opts: Optional[SolveOptions] = None) -> FitResult:
    """Minimize ``V_N`` over the feasible gain set starting from ``L0``.

    Raises :class:`InfeasibleStartError` if ``L0`` is not feasible. Running
    out of iterations is not an error; the best iterate is returned with
    ``converged=False``.
    """
    opts = opts or SolveOptions()
    L = plant.check_gain(L0).copy()
    prob = _Problem(plant, data, W, opts.alpha)
    cons = prob.feasible_constraint(L)
    if cons is None:
        raise InfeasibleStartError("initial gain is not strictly feasible")
    g, dg = cons
    V, grad, H = prob.full(L)
    mu = opts.mu_b_init if opts.mu_b_init is not None else 1e-2 * max(1.0, V)
    mu = max(mu, opts.mu_b_min)
    reg = opts.reg
    iters = 0
    levels: List[float] = []
    path = [L.copy()] if opts.record_path else None
    history: List[tuple] = []
    nq = L.size

    exact = False  # switched on once function values stop resolving progress

    def barrier_terms(V, grad, H, g, dg, mu):
        if exact:
            H = prob.exact_hessian(L, H)
        if mu == 0:
            return V, grad, H
        dgv = dg.reshape(-1)
        phi = V - mu * np.log(-g)
        gphi = grad - (mu / g) * dgv
        Hphi = H + (mu / g**2) * np.outer(dgv, dgv) - (mu / g) * constraint_hessian(L, plant, opts.alpha)
        return phi, gphi, Hphi

    def newton_step(Hphi, gphi):
        nonlocal reg
        while True:
            try:
                F = np.linalg.cholesky(Hphi + reg * np.eye(nq))
                break
            except np.linalg.LinAlgError:
                reg *= 10.0
        return -np.linalg.solve(F.T, np.linalg.solve(F, gphi))

    def descend(mu, tol_inner, final):
        nonlocal L, V, grad, H, g, dg, iters, reg, exact

        def done():
            if np.linalg.norm(gphi) <= tol_inner:
                return True
            # near the boundary nu = mu / -g inherits the rounding of g; the
            # least-squares multiplier does not
            return final and mu > 0 and kkt_residual(grad, dg)[0] <= tol_inner

        phi, gphi, Hphi = barrier_terms(V, grad, H, g, dg, mu)
        history.append((mu, phi))
        while not done() and iters < opts.max_iters:
            accepted = False
            while not accepted and reg <= 1e12:
                step = newton_step(Hphi, gphi)
                slope = float(gphi @ step)
                noise_floor = 1e-13 * max(1.0, abs(phi))
                if abs(slope) <= noise_floor and not exact:
                    # Gauss-Newton steps no longer certified by the values: use true curvature
                    exact = True
                    phi, gphi, Hphi = barrier_terms(V, grad, H, g, dg, mu)
                    continue
                t = 1.0
                for _ in range(opts.max_backtracks):
                    Lt = L + t * step.reshape(L.shape)
                    cons = prob.feasible_constraint(Lt)
                    if cons is not None:
                        Vt = prob.value(Lt)
                        phit = Vt - mu * np.log(-cons[0]) if mu > 0 else Vt
                        if np.isfinite(phit) and (
                            phit <= phi + opts.ls_c1 * t * slope
                            # gradient already at rounding level: accept non-increasing steps
                            or (abs(slope) <= noise_floor and phit <= phi + noise_floor)
                        ):
                            accepted = True
                            break
                    t *= opts.ls_backtrack
                if not accepted:
                    reg *= 10.0
            if not accepted:
                return False
            if np.linalg.norm(t * step) <= 1e-15 * (1.0 + np.linalg.norm(L)) and t < 1.0:
                return False
            L = Lt
            g, dg = cons
            V, grad, H = prob.full(L)
            phi, gphi, Hphi = barrier_terms(V, grad, H, g, dg, mu)
            reg = max(opts.reg, reg * 0.3)
            iters += 1
            history.append((mu, phi))
            if path is not None:
                path.append(L.copy())
        return done()

    while True:
        levels.append(mu)
        final = mu <= opts.mu_b_min * (1 + 1e-12)
        tol_inner = _tol(opts, V) if final else max(_tol(opts, V), mu)
        descend(mu, tol_inner, final)
        if final or iters >= opts.max_iters:
            break
        mu = max(mu * opts.mu_b_factor, opts.mu_b_min)

    nu = mu / -g
    cert = float(np.linalg.norm(grad + nu * dg.reshape(-1)))
    cert_ls, nu_ls = kkt_residual(grad, dg)
    if cert_ls < cert:
        cert, nu = cert_ls, nu_ls
    tol = _tol(opts, V)
    converged = cert <= tol
    message = "barrier stationarity" if converged else "iteration limit or stall"
    if opts.refine and g < -1e-3 and iters < opts.max_iters:
        saved = (L.copy(), V, grad.copy(), H.copy(), g, dg.copy(), len(history), None if path is None else len(path))
        levels.append(0.0)
        if descend(0.0, _tol(opts, V), True) or np.linalg.norm(grad) <= _tol(opts, V):
            nu = 0.0
            cert = float(np.linalg.norm(grad))
            converged = True
            message = "interior stationarity"
        elif not converged:
            message = "refinement did not reach tolerance"
        else:
            # keep the certified barrier solution
            L, V, grad, H, g, dg, nh, npth = saved
            del history[nh:]
            if path is not None:
                del path[npth:]
            levels.pop()
    return FitResult(
        L_hat=L, value=V, grad_norm=cert, iterations=iters, barrier_levels=levels,
        converged=bool(converged), constraint_slack=float(g), multiplier=float(nu),
        tol_grad=_tol(opts, V), trace_path=path, history=history, message=message,
    )


@dataclass
class Cluster:
    representative: np.ndarray
    count: int
    members: List[int]
    value: float


@dataclass
class MultiStartResult:
    solutions: List[Optional[FitResult]]
    clusters: List[Cluster]
    starts: List[Optional[np.ndarray]]
    failures: List[tuple]


def cluster_solutions(results, rel_tol: float = 1e-3) -> List[Cluster]:
    """Greedy clustering of final gains by Frobenius distance ``rel_tol * (1 + ||rep||)``."""
    clusters: List[Cluster] = []
    order = sorted((i for i, r in enumerate(results) if r is not None), key=lambda i: (results[i].value, i))
    for i in order:
        r = results[i]
        for c in clusters:
            if np.linalg.norm(r.L_hat - c.representative) <= rel_tol * (1.0 + np.linalg.norm(c.representative)):
                c.count += 1
                c.members.append(i)
                break
        else:
            clusters.append(Cluster(r.L_hat.copy(), 1, [i], r.value))
    for c in clusters:
        c.members.sort()
    return clusters


def start_seeds(seed: int, n: int):
    return np.random.SeedSequence(seed).spawn(n)


def multi_start(plant: StateSpaceModel, data: Dataset, W, alpha: float, n_starts: int, seed: int,
                opts: Optional[SolveOptions] = None, init: str = "dare", rel_tol: float = 1e-3) -> MultiStartResult:
    """Run :func:`minimize_pem` from ``n_starts`` sampled feasible gains and cluster the results.

    A start that fails is recorded in ``failures`` as ``(index, message)``.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    opts = dataclasses.replace(opts or SolveOptions(), alpha=alpha)
    solutions: List[Optional[FitResult]] = []
    starts: List[Optional[np.ndarray]] = []
    failures = []
    for i, ss in enumerate(start_seeds(seed, n_starts)):
        try:
            L0 = sample_feasible_gain(plant, alpha, ss, method=init)
            starts.append(L0)
            solutions.append(minimize_pem(plant, data, W, L0, opts))
        except KalmanGainError as exc:
            logger.warning("start %d failed: %s", i, exc)
            if len(starts) == i:
                starts.append(None)
            solutions.append(None)
            failures.append((i, str(exc)))
    return MultiStartResult(solutions, cluster_solutions(solutions, rel_tol), starts, failures)


def grid_search(plant: StateSpaceModel, data: Dataset, W, grid, alpha: Optional[float] = None):
    """Evaluate ``V_N`` on a list of gains and return ``(best_gain, values)``.

    Gains with ``rho(A - LC) >= 1`` (or outside the feasible set for the
    given ``alpha``) get the value ``inf``. Ties go to the lowest index.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1, plant.n, plant.q)
    if not len(grid):
        raise ValueError("empty grid")
    ok = np.array([
        bool(membership(L, plant, alpha)) if alpha is not None
        else spectral_radius(plant.closed_loop(L)) < 1 - 1e-12
        for L in grid
    ])
    values = np.full(len(grid), np.inf)
    if ok.any():
        values[ok] = sweep(grid[ok], plant, data, W, order=0)
    if not np.isfinite(values).any():
        raise EmptyFeasibleGridError("no stable point in the grid")
    return grid[int(np.argmin(values))].copy(), values


@dataclass
class MleDiagnostics:
    objective: List[float]
    sweeps: int
    converged: bool
    fits: List[FitResult]


def augment_for_beta(plant: StateSpaceModel, ext: ExtendedData, beta):
    """Fold the known term ``Phi_k beta`` into an extra input channel."""
    n = plant.n
    aug = StateSpaceModel(plant.A, np.hstack([plant.B, np.eye(n)]), plant.C, plant.x0)
    u = np.hstack([ext.base.u, ext.Phi @ np.asarray(beta, dtype=float).reshape(-1)])
    return aug, Dataset(u, ext.base.y)


def minimize_mle(plant: StateSpaceModel, ext: ExtendedData, alpha: float, theta0: MleParams,
                 opts: Optional[SolveOptions] = None, tol: float = 1e-8, max_sweeps: int = 50,
                 update_S: bool = True):
    """Alternating minimization of the likelihood objective over ``(beta, L, S)``.

    Each sweep does the closed-form beta update, a constrained PEM solve for
    ``L`` with weight ``S^-1`` (kept only if it does not increase the
    objective), then the closed-form ``S`` update. Stops when the total
    parameter change falls below ``tol``.
    """
    opts = dataclasses.replace(opts or SolveOptions(), alpha=alpha)
    if not membership(theta0.L, plant, alpha):
        raise InfeasibleStartError("initial gain is not feasible")
    theta = MleParams(theta0.beta.copy(), plant.check_gain(theta0.L).copy(), theta0.S.copy())
    history = [mle_value(theta, plant, ext)]
    fits: List[FitResult] = []
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        old = (theta.beta.copy(), theta.L.copy(), theta.S.copy())
        if ext.n_beta:
            theta = MleParams(beta_update(theta, plant, ext), theta.L, theta.S)
        aug, data = augment_for_beta(plant, ext, theta.beta)
        Winv = np.linalg.inv(theta.S)
        Winv = 0.5 * (Winv + Winv.T)
        fit = minimize_pem(aug, data, Winv, theta.L, opts)
        fits.append(fit)
        if fit.value <= sweep(theta.L[None], aug, data, Winv, order=0)[0]:
            theta = MleParams(theta.beta, fit.L_hat, theta.S)
        if update_S:
            theta = MleParams(theta.beta, theta.L, covariance_update(theta, plant, ext))
        history.append(mle_value(theta, plant, ext))
        change = sum(float(np.linalg.norm(a - b)) for a, b in zip((theta.beta, theta.L, theta.S), old))
        if change <= tol:
            converged = True
            break
    return theta, MleDiagnostics(history, sweeps, converged, fits)

