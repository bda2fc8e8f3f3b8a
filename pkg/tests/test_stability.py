import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kalmangain import checks
from kalmangain.exceptions import UnstableMatrixError
from kalmangain.model import StateSpaceModel
from kalmangain.stability import (certificate, constraint_hessian, constraint_value_grad, gain_box, membership,
                                  sample_feasible_gain, solve_dlyap, spectral_radius, stability_bounds,
                                  verify_uniform_stability)


class TestDlyap:
    def test_scalar(self):
        assert solve_dlyap([[0.9]], [[1.0]])[0, 0] == pytest.approx(1 / (1 - 0.81), abs=1e-10)
        assert solve_dlyap([[0.9]], [[1.0]])[0, 0] == pytest.approx(5.2631578947, abs=1e-9)

    def test_zero_matrix(self):
        Q = np.array([[2.0, 0.5], [0.5, 1.0]])
        assert np.array_equal(solve_dlyap(np.zeros((2, 2)), Q), Q)

    def test_unstable(self):
        with pytest.raises(UnstableMatrixError):
            solve_dlyap([[1.0]], [[1.0]])

    def test_random_oracle(self, rng):
        res, series = checks.check_dlyap(rng, trials=30)
        assert res <= 1e-10 and series <= 1e-8

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), rho=st.floats(0.0, 0.95))
    def test_symmetric_psd(self, seed, rho):
        rng = np.random.default_rng(seed)
        M = checks.random_stable_matrix(3, rho, rng) if rho > 0 else np.zeros((3, 3))
        G = rng.standard_normal((3, 3))
        P = solve_dlyap(M, G @ G.T)
        assert np.array_equal(P, P.T)
        assert np.linalg.eigvalsh(P).min() >= -1e-10


class TestSpectralRadius:
    def test_diagonal(self):
        assert spectral_radius(np.diag([0.5, -0.9])) == pytest.approx(0.9)

    def test_nilpotent(self):
        assert spectral_radius([[0.0, 1.0], [0.0, 0.0]]) == 0.0

    @given(theta=st.floats(0, 2 * np.pi), r=st.floats(0.01, 3.0))
    def test_scaled_rotation(self, theta, r):
        R = r * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        assert spectral_radius(R) == pytest.approx(r, rel=1e-12)


class TestMembership:
    def test_deadbeat_scalar(self):
        plant = StateSpaceModel([[0.0]], [[1.0]], [[1.0]])
        m = membership([[0.0]], plant, 0.02)
        assert m.feasible and m.P[0, 0] == pytest.approx(1.0) and m.constraint == pytest.approx(-1.0)

    def test_unstable(self, scalar_plant):
        m = membership([[2.0]], scalar_plant, 0.02)
        assert not m and m.reason == "unstable"

    def test_scalar_closed_form(self, scalar_plant):
        m = membership([[0.8]], scalar_plant, 0.02)
        assert m.feasible
        assert m.P[0, 0] == pytest.approx(1 / 0.99, abs=1e-12)
        assert m.constraint + 1 == pytest.approx(0.02 * (1 / 0.99 - 1), abs=1e-12)
        assert m.constraint + 1 == pytest.approx(2.02e-4, abs=1e-7)

    def test_trace_violation(self, scalar_plant):
        # M = 0.99 gives trace(P - I) ~ 49 and alpha * 49 > 1
        m = membership([[-0.09]], scalar_plant, 0.1)
        assert not m and m.reason == "trace constraint violated"

    def test_invalid_alpha(self, scalar_plant):
        with pytest.raises(ValueError):
            membership([[0.8]], scalar_plant, 0.0)

    def test_feasible_set_properties(self, two_state):
        plant = two_state.plant
        gamma, _ = stability_bounds(0.02)
        for ss in np.random.SeedSequence(5).spawn(30):
            L = sample_feasible_gain(plant, 0.02, ss)
            m = membership(L, plant, 0.02)
            assert np.linalg.eigvalsh(m.P).min() >= 1 - 1e-9
            assert 0.02 * np.trace(m.P - np.eye(2)) <= 1 + 1e-12
            assert np.linalg.norm(L @ plant.C, 2) <= np.linalg.norm(plant.A, 2) + gamma


class TestConstraint:
    def test_fd_gradient(self, three_state):
        plant = three_state.plant
        for ss in np.random.SeedSequence(1).spawn(20):
            L = sample_feasible_gain(plant, 0.02, ss)
            g, dg = constraint_value_grad(L, plant, 0.02)
            fd = checks.fd_gradient(lambda X: constraint_value_grad(X, plant, 0.02)[0], L)
            assert checks.relative_error(dg, fd) <= 1e-6

    def test_deadbeat(self):
        plant = StateSpaceModel([[0.5, 1.0], [0.0, 0.3]], np.zeros((2, 1)), np.eye(2))
        g, dg = constraint_value_grad(plant.A, plant, 0.1)
        assert g == pytest.approx(-1.0) and np.all(dg == 0)

    def test_scalar_symbolic(self, scalar_plant):
        # g(L) = alpha * m^2 / (1 - m^2) - 1 with m = 0.9 - L, g' = -2 alpha m / (1 - m^2)^2
        alpha, L = 0.02, 0.55
        m = 0.9 - L
        _, dg = constraint_value_grad([[L]], scalar_plant, alpha)
        assert dg[0, 0] == pytest.approx(-2 * alpha * m / (1 - m**2) ** 2, abs=1e-10)

    def test_hessian_fd(self, three_state):
        plant = three_state.plant
        L = sample_feasible_gain(plant, 0.02, 11)
        H = constraint_hessian(L, plant, 0.02)
        fd = np.empty_like(H)
        for a in range(L.size):
            fd[a] = checks.fd_gradient(
                lambda X: constraint_value_grad(X, plant, 0.02)[1].ravel()[a], L).ravel()
        assert checks.relative_error(H, fd) <= 1e-6
        assert np.array_equal(H, H.T)

    def test_unstable(self, scalar_plant):
        with pytest.raises(UnstableMatrixError):
            constraint_value_grad([[2.0]], scalar_plant, 0.02)


class TestBounds:
    def test_values(self):
        gamma, lam = stability_bounds(0.02)
        assert gamma == pytest.approx(7.1414284, abs=1e-7)
        assert lam == pytest.approx(0.9901475, abs=1e-7)

    def test_alpha_one(self):
        assert stability_bounds(1.0) == pytest.approx((np.sqrt(2), 1 / np.sqrt(2)))

    def test_limits(self):
        alphas = [1e-2, 1.0, 1e2, 1e6]
        g, lam = zip(*(stability_bounds(a) for a in alphas))
        assert all(a > b for a, b in zip(g, g[1:])) and all(a > b for a, b in zip(lam, lam[1:]))
        assert g[-1] == pytest.approx(1.0, abs=1e-6) and lam[-1] <= 1e-3

    def test_invalid(self):
        with pytest.raises(ValueError):
            stability_bounds(-1.0)


class TestUniformStability:
    def test_feasible_samples(self, two_state):
        gamma, lam = stability_bounds(0.02)
        for ss in np.random.SeedSequence(2).spawn(100):
            L = sample_feasible_gain(two_state.plant, 0.02, ss)
            assert verify_uniform_stability(L, two_state.plant, gamma, lam, 200)

    def test_unstable_fails(self, scalar_plant):
        assert not verify_uniform_stability([[-0.2]], scalar_plant, 10.0, 0.99, 200)

    def test_deadbeat(self):
        plant = StateSpaceModel([[0.0]], [[1.0]], [[1.0]])
        assert verify_uniform_stability([[0.0]], plant, 1.0, 0.5, 10)

    def test_invalid(self, scalar_plant):
        with pytest.raises(ValueError):
            verify_uniform_stability([[0.8]], scalar_plant, 1.0, 0.5, 0)

    def test_empty_set_reported(self, three_state):
        rows = checks.check_uniform_stability(three_state.plant, (0.02, 1.0), 10, 0)
        assert rows[0]["sampled"] == 10 and not rows[0]["empty"]
        assert rows[1]["empty"] and rows[1]["violations"] == 0

    def test_certificate(self, scalar_plant):
        cert = certificate([[0.8]], scalar_plant, 0.02)
        assert cert.gamma == pytest.approx(7.1414284, abs=1e-7)
        with pytest.raises(UnstableMatrixError):
            certificate([[2.0]], scalar_plant, 0.02)


class TestSampling:
    def test_two_state_fifty(self, two_state):
        for ss in np.random.SeedSequence(3).spawn(50):
            assert membership(sample_feasible_gain(two_state.plant, 0.02, ss), two_state.plant, 0.02)

    def test_deterministic(self, three_state):
        assert np.array_equal(sample_feasible_gain(three_state.plant, 0.02, 7),
                              sample_feasible_gain(three_state.plant, 0.02, 7))

    def test_uniform_method(self, two_state):
        L = sample_feasible_gain(two_state.plant, 0.02, 4, method="uniform")
        assert membership(L, two_state.plant, 0.02)
        assert np.abs(L).max() <= gain_box(two_state.plant, 0.02)

    def test_exhausted(self, three_state):
        from kalmangain.exceptions import FeasibleSampleExhausted

        with pytest.raises(FeasibleSampleExhausted):
            sample_feasible_gain(three_state.plant, 1.0, 0, max_tries=20)
