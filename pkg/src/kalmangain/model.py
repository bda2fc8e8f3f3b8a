"""LTI plant in innovation form, data generation and the one-step predictor.

Conventions: a dataset stores samples k = 0..N as row-major arrays ``u`` of
shape ``(N + 1, p)`` and ``y`` of shape ``(N + 1, q)``. Gains ``L`` have shape
``(n, q)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .exceptions import DimensionError, NonFiniteTrajectoryError


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.array(a, dtype=float, ndmin=2, copy=True)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got shape {a.shape}")
    return a


def observability_matrix(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Stack ``[C; CA; ...; CA^(n-1)]``."""
    n = A.shape[0]
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


@dataclass
class StateSpaceModel:
    """Known plant matrices ``(A, B, C)`` and initial state ``x0``.

    ``B`` may have zero columns (autonomous plant). Construction validates
    dimensions, full row rank of ``C`` and observability of ``(A, C)``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.A = _as_matrix(self.A, "A")
        n = self.A.shape[0]
        if n < 1 or self.A.shape != (n, n):
            raise DimensionError(f"A must be square with n >= 1, got {self.A.shape}")
        B = np.asarray(self.B, dtype=float)
        if B.size == 0:
            B = np.zeros((n, 0))
        self.B = _as_matrix(B, "B") if B.ndim < 2 else B.copy()
        if self.B.shape[0] != n:
            raise DimensionError(f"B must have {n} rows, got {self.B.shape}")
        self.C = _as_matrix(self.C, "C")
        if self.C.shape[1] != n or self.C.shape[0] < 1:
            raise DimensionError(f"C must be q x {n} with q >= 1, got {self.C.shape}")
        if self.x0 is None:
            self.x0 = np.zeros(n)
        self.x0 = np.array(self.x0, dtype=float).reshape(-1)
        if self.x0.shape != (n,):
            raise DimensionError(f"x0 must have length {n}, got {self.x0.shape}")
        if np.linalg.matrix_rank(self.C) != self.q:
            raise ValueError("C must have full row rank")
        if np.linalg.matrix_rank(observability_matrix(self.A, self.C)) != n:
            raise ValueError("(A, C) is not observable")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.C.shape[0]

    def closed_loop(self, L) -> np.ndarray:
        """Return ``A - L C``."""
        return self.A - np.asarray(L, dtype=float).reshape(self.n, self.q) @ self.C

    def check_gain(self, L) -> np.ndarray:
        L = np.asarray(L, dtype=float)
        if L.size != self.n * self.q:
            raise DimensionError(f"gain must be {self.n} x {self.q}, got shape {L.shape}")
        return L.reshape(self.n, self.q)


@dataclass
class InnovationModel:
    """Plant together with the true gain ``L_star`` and innovation covariance ``S_star``."""

    plant: StateSpaceModel
    L_star: np.ndarray
    S_star: np.ndarray

    def __post_init__(self):
        self.L_star = self.plant.check_gain(self.L_star).copy()
        self.S_star = _as_matrix(self.S_star, "S_star")
        q = self.plant.q
        if self.S_star.shape != (q, q):
            raise DimensionError(f"S_star must be {q} x {q}, got {self.S_star.shape}")
        if not np.allclose(self.S_star, self.S_star.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.S_star).max())):
            raise ValueError("S_star must be symmetric")
        if np.linalg.eigvalsh(self.S_star).min() <= 0:
            raise ValueError("S_star must be positive definite")
        rho = np.abs(np.linalg.eigvals(self.plant.closed_loop(self.L_star))).max()
        if rho >= 1:
            raise ValueError(f"A - L_star C must be stable, spectral radius is {rho:.6g}")


@dataclass
class Dataset:
    """Recorded inputs and outputs for k = 0..N."""

    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        self.u = np.asarray(self.u, dtype=float)
        if self.u.ndim == 1:
            self.u = self.u[:, None] if self.u.size else np.zeros((len(self.y), 0))
        if self.y.ndim != 2 or self.u.ndim != 2:
            raise DimensionError("u and y must be 2-D (time-major)")
        if len(self.u) != len(self.y):
            raise DimensionError(f"u has {len(self.u)} samples but y has {len(self.y)}")
        if len(self.y) < 2:
            raise DimensionError("a dataset needs at least two samples (N >= 1)")
        if not (np.isfinite(self.u).all() and np.isfinite(self.y).all()):
            raise ValueError("dataset contains non-finite entries")

    @property
    def N(self) -> int:
        return len(self.y) - 1

    def head(self, N: int) -> "Dataset":
        """Prefix with samples 0..N."""
        if not 1 <= N <= self.N:
            raise ValueError(f"N must lie in [1, {self.N}], got {N}")
        return Dataset(self.u[: N + 1], self.y[: N + 1])


@dataclass
class ExtendedData:
    """Dataset plus the known regressors ``Phi_k`` of shape ``(N + 1, n, n_beta)``."""

    base: Dataset
    Phi: np.ndarray

    def __post_init__(self):
        self.Phi = np.asarray(self.Phi, dtype=float)
        if self.Phi.ndim != 3 or len(self.Phi) != len(self.base.y):
            raise DimensionError(
                f"Phi must have shape (N + 1, n, n_beta) with N + 1 = {len(self.base.y)}, got {self.Phi.shape}"
            )

    @property
    def n_beta(self) -> int:
        return self.Phi.shape[2]

    @property
    def N(self) -> int:
        return self.base.N

    def head(self, N: int) -> "ExtendedData":
        return ExtendedData(self.base.head(N), self.Phi[: N + 1])


@dataclass
class NoiseSpec:
    """Zero-mean white noise source.

    ``kind`` is one of ``"gaussian"`` (covariance ``cov``), ``"mixture"``
    (each component is ``N(0, sigma2)`` with probability ``p_hit`` and 0
    otherwise) or ``"zero"``.
    """

    kind: str
    cov: Optional[np.ndarray] = None
    p_hit: Optional[float] = None
    sigma2: Optional[float] = None
    seed: int = 0
    _factor: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        if self.kind == "gaussian":
            self.cov = _as_matrix(self.cov, "cov")
            if self.cov.shape[0] != self.cov.shape[1] or not np.allclose(self.cov, self.cov.T):
                raise ValueError("gaussian covariance must be square and symmetric")
            w, V = np.linalg.eigh(self.cov)
            if w.min() < -1e-12 * max(1.0, w.max()):
                raise ValueError("gaussian covariance must be positive semi-definite")
            self._factor = V * np.sqrt(np.clip(w, 0.0, None))
        elif self.kind == "mixture":
            if self.p_hit is None or not 0 < self.p_hit <= 1:
                raise ValueError("mixture noise needs 0 < p_hit <= 1")
            if self.sigma2 is None or self.sigma2 <= 0:
                raise ValueError("mixture noise needs sigma2 > 0")
        elif self.kind != "zero":
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @classmethod
    def gaussian(cls, cov, seed: int = 0) -> "NoiseSpec":
        return cls("gaussian", cov=cov, seed=seed)

    @classmethod
    def mixture(cls, p_hit: float, sigma2: float, seed: int = 0) -> "NoiseSpec":
        return cls("mixture", p_hit=p_hit, sigma2=sigma2, seed=seed)

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls("zero")

    def _check_dim(self, dim: int):
        if self.kind == "gaussian" and self.cov.shape[0] != dim:
            raise DimensionError(f"noise dimension {self.cov.shape[0]} does not match channel dimension {dim}")

    def draw(self, n_samples: int, dim: int) -> np.ndarray:
        """Draw ``n_samples`` vectors of length ``dim`` from a fresh generator seeded by ``seed``."""
        self._check_dim(dim)
        rng = np.random.default_rng(self.seed)
        if self.kind == "zero":
            return np.zeros((n_samples, dim))
        if self.kind == "gaussian":
            return rng.standard_normal((n_samples, dim)) @ self._factor.T
        hit = rng.random((n_samples, dim)) < self.p_hit
        z = rng.standard_normal((n_samples, dim)) * np.sqrt(self.sigma2)
        return np.where(hit, z, 0.0)

    def covariance(self, dim: int) -> np.ndarray:
        self._check_dim(dim)
        if self.kind == "gaussian":
            return self.cov.copy()
        if self.kind == "mixture":
            return self.p_hit * self.sigma2 * np.eye(dim)
        return np.zeros((dim, dim))

    def fourth_moment(self, dim: int) -> float:
        """Analytic ``E ||w||^4``."""
        S = self.covariance(dim)
        if self.kind == "gaussian":
            return float(np.trace(S) ** 2 + 2 * np.trace(S @ S))
        if self.kind == "mixture":
            m2 = self.p_hit * self.sigma2
            m4 = 3 * self.p_hit * self.sigma2**2
            return float(dim * m4 + dim * (dim - 1) * m2**2)
        return 0.0


def _check_inputs(inputs, p: int) -> np.ndarray:
    u = np.asarray(inputs, dtype=float)
    if u.ndim == 1:
        u = u[:, None] if p > 0 else np.zeros((len(u), 0))
    if u.ndim != 2 or u.shape[1] != p:
        raise DimensionError(f"inputs must have shape (N + 1, {p}), got {u.shape}")
    if len(u) < 2:
        raise DimensionError("need at least two samples")
    return u


def _raise_if_nonfinite(x: np.ndarray, k: int):
    if not np.isfinite(x).all():
        raise NonFiniteTrajectoryError(f"state became non-finite at k = {k}")


@numba.njit(cache=True)
def _filter_kernel(A, C, L, forcing, x0, signal, generate):
    # generate=True: signal holds innovations e_k and y_k = C x_k + e_k is produced.
    # generate=False: signal holds outputs y_k.
    T = signal.shape[0]
    n = A.shape[0]
    q = C.shape[0]
    xs = np.empty((T, n))
    ys = np.empty((T, q))
    rs = np.empty((T, q))
    x = x0.copy()
    xn = np.empty(n)
    cx = np.empty(q)
    for k in range(T):
        xs[k] = x
        for i in range(q):
            acc = 0.0
            for b in range(n):
                acc += C[i, b] * x[b]
            cx[i] = acc
        for i in range(q):
            if generate:
                ys[k, i] = cx[i] + signal[k, i]
            else:
                ys[k, i] = signal[k, i]
            rs[k, i] = ys[k, i] - cx[i]
        ok = True
        for a in range(n):
            acc = forcing[k, a]
            for b in range(n):
                acc += A[a, b] * x[b]
            for j in range(q):
                acc += L[a, j] * rs[k, j]
            xn[a] = acc
            if not np.isfinite(acc):
                ok = False
        if not ok:
            return xs, ys, rs, k
        x[:] = xn
    return xs, ys, rs, -1


def _run_filter(plant, L, forcing, signal, generate, what):
    xs, ys, rs, bad = _filter_kernel(plant.A, plant.C, np.ascontiguousarray(L),
                                     np.ascontiguousarray(forcing), plant.x0,
                                     np.ascontiguousarray(signal, dtype=float), generate)
    if bad >= 0:
        raise NonFiniteTrajectoryError(f"{what} diverged at k = {bad}")
    return xs, ys, rs


def simulate_innovation(model: InnovationModel, inputs, noise: NoiseSpec):
    """Simulate the innovation-form system driven by ``noise``.

    Returns ``(Dataset, innovations)``. The returned innovations are the
    realized values ``y_k - C x_k`` in floating point, so that the predictor
    run at ``L_star`` reproduces them bit for bit.
    """
    plant = model.plant
    u = _check_inputs(inputs, plant.p)
    e = noise.draw(len(u), plant.q)
    _, y, r = _run_filter(plant, model.L_star, u @ plant.B.T, e, True, "simulation")
    return Dataset(u, y), r


def simulate_physical(plant: StateSpaceModel, G, process_noise: NoiseSpec, meas_noise: NoiseSpec, inputs) -> Dataset:
    """Simulate ``x+ = A x + B u + G w``, ``y = C x + v``."""
    u = _check_inputs(inputs, plant.p)
    G = _as_matrix(G, "G") if np.ndim(G) else np.array([[float(G)]])
    if G.shape[0] != plant.n:
        raise DimensionError(f"G must have {plant.n} rows, got {G.shape}")
    w = process_noise.draw(len(u), G.shape[1])
    v = meas_noise.draw(len(u), plant.q)
    A, B, C = plant.A, plant.B, plant.C
    y = np.empty((len(u), plant.q))
    x = plant.x0.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(len(u)):
            y[k] = C @ x + v[k]
            x = A @ x + B @ u[k] + G @ w[k]
            _raise_if_nonfinite(x, k)
    return Dataset(u, y)


def simulate_extended(model: InnovationModel, inputs, Phi, beta, noise: NoiseSpec):
    """Innovation-form simulation with the extra linear term ``Phi_k beta`` in the state update."""
    plant = model.plant
    u = _check_inputs(inputs, plant.p)
    Phi = np.asarray(Phi, dtype=float)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if Phi.shape != (len(u), plant.n, beta.size):
        raise DimensionError(f"Phi must have shape {(len(u), plant.n, beta.size)}, got {Phi.shape}")
    e = noise.draw(len(u), plant.q)
    _, y, r = _run_filter(plant, model.L_star, u @ plant.B.T + Phi @ beta, e, True, "simulation")
    return ExtendedData(Dataset(u, y), Phi), r


def predict_states(plant: StateSpaceModel, L, data: Dataset):
    """Run the one-step Kalman predictor with gain ``L``.

    Returns ``(xhat, residuals)`` with ``xhat[k]`` the prediction of ``x_k``
    given data up to ``k - 1`` and ``residuals[k] = y_k - C xhat[k]``.
    Large but finite values are returned; overflow raises
    :class:`NonFiniteTrajectoryError`.
    """
    L = plant.check_gain(L)
    _check_data(plant, data)
    xhat, _, r = _run_filter(plant, L, data.u @ plant.B.T, data.y, False, "predictor")
    return xhat, r


def predict_states_extended(plant: StateSpaceModel, beta, L, ext: ExtendedData):
    """Predictor with the additional known term ``Phi_k beta`` in the state update."""
    L = plant.check_gain(L)
    data = ext.base
    _check_data(plant, data)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if ext.Phi.shape[1] != plant.n or beta.size != ext.n_beta:
        raise DimensionError(
            f"Phi_k beta mismatch: Phi is {ext.Phi.shape[1:]} and beta has {beta.size} entries"
        )
    forcing = data.u @ plant.B.T + ext.Phi @ beta
    xhat, _, r = _run_filter(plant, L, forcing, data.y, False, "predictor")
    return xhat, r


def _check_data(plant: StateSpaceModel, data: Dataset):
    if data.y.shape[1] != plant.q or data.u.shape[1] != plant.p:
        raise DimensionError(
            f"dataset has p = {data.u.shape[1]}, q = {data.y.shape[1]}; plant expects p = {plant.p}, q = {plant.q}"
        )


def _phi1(x: float) -> float:
    # (1 - exp(-x)) / x
    if x < 1e-4:
        return 1 - x / 2 + x**2 / 6 - x**3 / 24
    return -np.expm1(-x) / x


def _phi2(x: float) -> float:
    # (x - 1 + exp(-x)) / x**2
    if x < 1e-3:
        return 0.5 - x / 6 + x**2 / 24 - x**3 / 120 + x**4 / 720
    return (x + np.expm1(-x)) / x**2


def discretize_particle(mu: float, dt: float):
    """Exact zero-order-hold discretization of ``q'' = -mu q' + f``.

    State is ``[q, q']``. Returns ``(A_d, B_f)`` with ``B_f`` of shape (2, 1).
    """
    if not mu > 0 or not dt > 0:
        raise ValueError("mu and dt must be positive")
    x = mu * dt
    decay = np.exp(-x)
    A_d = np.array([[1.0, dt * _phi1(x)], [0.0, decay]])
    B_f = np.array([[dt**2 * _phi2(x)], [dt * _phi1(x)]])
    return A_d, B_f


def build_three_state(mu: float, dt: float, a_f: float):
    """Particle with a first-order force model, measuring acceleration and position.

    State is ``[q, q', f]`` with ``f+ = a_f f + w``. The first output is the
    acceleration ``-mu q' + f`` at the sample instant, the second the
    position. Returns ``(plant, G)`` where ``G`` is the process-noise channel.
    """
    if not abs(a_f) < 1:
        raise ValueError("|a_f| must be < 1")
    A_d, B_f = discretize_particle(mu, dt)
    A = np.zeros((3, 3))
    A[:2, :2] = A_d
    A[:2, 2:] = B_f
    A[2, 2] = a_f
    C = np.array([[0.0, -mu, 1.0], [1.0, 0.0, 0.0]])
    B = np.array([[0.0], [0.0], [1.0]])
    G = np.array([[0.0], [0.0], [1.0]])
    return StateSpaceModel(A, B, C), G
