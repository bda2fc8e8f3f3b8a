import numpy as np
import pytest
from conftest import FixedNoise
from hypothesis import given, settings
from hypothesis import strategies as st

from kalmangain import checks
from kalmangain.exceptions import NonFiniteTrajectoryError, SingularRegressionError, UnstableMatrixError
from kalmangain.model import (Dataset, ExtendedData, NoiseSpec, predict_states_extended, simulate_extended,
                              simulate_innovation)
from kalmangain.pem import (MleParams, asymptotic_eval, asymptotic_values, beta_update, covariance_update,
                            empirical_uniform_convergence, mle_partial_updates, mle_value, pem_eval, pem_value,
                            sigma_bar_direction, sweep)
from kalmangain.stability import sample_feasible_gain, spectral_radius


def scalar_data(model, e):
    data, _ = simulate_innovation(model, np.zeros((len(e), 1)), FixedNoise(np.reshape(e, (-1, 1))))
    return data


class TestPemValue:
    def test_truth_gives_innovation_energy(self, scalar_model):
        data = scalar_data(scalar_model, [0.3, 1.0, -1.0])
        assert pem_value([[0.8]], scalar_model.plant, data) == pytest.approx(1.0, abs=1e-15)

    def test_hand_recursion(self, scalar_model):
        data = scalar_data(scalar_model, [1.0, 0.0])
        assert pem_value([[0.9]], scalar_model.plant, data) == pytest.approx(0.01, abs=1e-14)

    def test_weight(self, three_state, rng):
        model = three_state.model
        data, e = simulate_innovation(model, np.zeros((51, 1)), NoiseSpec.gaussian(model.S_star, seed=1))
        W = np.array([[2.0, 0.3], [0.3, 1.0]])
        ref = np.einsum("ki,ij,kj->", e[1:], W, e[1:]) / 50
        assert pem_value(model.L_star, model.plant, data, W) == pytest.approx(ref, rel=1e-13)

    def test_input_invariance(self, two_state, rng):
        model = two_state.model
        noise = NoiseSpec.gaussian(model.S_star, seed=5)
        d1, _ = simulate_innovation(model, np.zeros((501, 1)), noise)
        d2, _ = simulate_innovation(model, rng.standard_normal((501, 1)), noise)
        grid = np.stack([sample_feasible_gain(model.plant, 0.02, s) for s in np.random.SeedSequence(0).spawn(15)])
        v1 = sweep(grid, model.plant, d1, order=0)
        v2 = sweep(grid, model.plant, d2, order=0)
        assert np.abs(v1 - v2).max() <= 1e-12 * max(1.0, np.abs(v1).max())

    def test_sweep_matches_pointwise(self, three_state):
        model = three_state.model
        data = three_state.simulate(300, 2)
        Ls = np.stack([sample_feasible_gain(model.plant, 0.02, s) for s in range(4)])
        v = sweep(Ls, model.plant, data, order=0)
        for L, val in zip(Ls, v):
            assert val == pytest.approx(pem_value(L, model.plant, data), rel=1e-12)

    def test_overflow_marked(self, scalar_plant):
        data = Dataset(np.zeros((3000, 1)), np.ones((3000, 1)))
        v, g = sweep(np.array([[[-50.0]], [[0.8]]]), scalar_plant, data, order=1)
        assert v[0] == np.inf and np.isnan(g[0]).all() and np.isfinite(v[1])
        with pytest.raises(NonFiniteTrajectoryError):
            pem_eval([[-50.0]], scalar_plant, data)


class TestPemGradient:
    def test_hand_derivative(self, scalar_model):
        data = scalar_data(scalar_model, [1.0, 0.0])
        assert pem_eval([[0.9]], scalar_model.plant, data).gradient[0, 0] == pytest.approx(0.2, abs=1e-13)

    @pytest.mark.parametrize("name", ["two_state", "three_state"])
    def test_finite_differences(self, name, request):
        system = request.getfixturevalue(name)
        plant = system.plant
        data = system.simulate(500, 1)
        for ss in np.random.SeedSequence(4).spawn(20):
            L = sample_feasible_gain(plant, 0.02, ss)
            ev = pem_eval(L, plant, data)
            fd = checks.fd_gradient(lambda X: pem_value(X, plant, data), L)
            assert checks.relative_error(ev.gradient, fd) <= 1e-5

    def test_weighted_gradient(self, three_state):
        plant = three_state.plant
        data = three_state.simulate(200, 3)
        W = np.array([[1.5, -0.2], [-0.2, 0.7]])
        L = sample_feasible_gain(plant, 0.02, 9)
        fd = checks.fd_gradient(lambda X: pem_value(X, plant, data, W), L)
        assert checks.relative_error(pem_eval(L, plant, data, W).gradient, fd) <= 1e-5

    def test_gauss_newton_hessian_psd(self, three_state):
        plant = three_state.plant
        data = three_state.simulate(300, 4)
        for s in range(10):
            H = pem_eval(sample_feasible_gain(plant, 0.02, s), plant, data).gn_hessian
            assert np.linalg.eigvalsh(H).min() >= -1e-12 * np.abs(H).max()

    def test_unbiased_at_truth(self, one_dim):
        model = one_dim.model
        grads = []
        for seed in range(200):
            data, _ = simulate_innovation(model, np.zeros((1001, 1)), NoiseSpec.gaussian(model.S_star, seed=seed))
            grads.append(sweep(model.L_star[None], model.plant, data, order=1)[1][0, 0, 0])
        grads = np.array(grads)
        se = grads.std(ddof=1) / np.sqrt(len(grads))
        assert abs(grads.mean()) <= 4 * se


class TestAsymptotic:
    def test_truth(self, three_state):
        model = three_state.model
        ev = asymptotic_eval(model.L_star, model)
        assert np.all(ev.Sigma_bar == 0) and np.all(ev.D == 0) and np.all(ev.grad_V_bar == 0)
        assert ev.V_bar == pytest.approx(np.trace(model.S_star), rel=1e-15)

    def test_scalar_closed_form(self, scalar_model):
        ev = asymptotic_eval([[0.5]], scalar_model)
        assert ev.Sigma_bar[0, 0] == pytest.approx(0.09 / 0.84, abs=1e-10)
        assert ev.V_bar == pytest.approx(1.10714286, abs=1e-8)
        assert ev.Lam_W[0, 0] == pytest.approx(1 / 0.84, abs=1e-10)
        assert ev.D[0, 0] == pytest.approx(-0.34285714, abs=1e-8)
        assert ev.grad_V_bar[0, 0] == pytest.approx(-0.81632653, abs=1e-8)
        fd = checks.fd_gradient(lambda X: asymptotic_eval(X, scalar_model).V_bar, np.array([[0.5]]))
        assert fd[0, 0] == pytest.approx(ev.grad_V_bar[0, 0], abs=1e-8)

    @pytest.mark.parametrize("name", ["two_state", "three_state"])
    def test_finite_differences(self, name, request):
        model = request.getfixturevalue(name).model
        W = np.eye(model.plant.q)
        for ss in np.random.SeedSequence(6).spawn(20):
            L = sample_feasible_gain(model.plant, 0.02, ss, method="uniform" if name == "two_state" else "dare")
            ev = asymptotic_eval(L, model, W)
            fd = checks.fd_gradient(lambda X: asymptotic_eval(X, model, W).V_bar, L)
            assert checks.relative_error(ev.grad_V_bar, fd) <= 1e-6

    def test_unstable(self, scalar_model):
        with pytest.raises(UnstableMatrixError):
            asymptotic_eval([[2.0]], scalar_model)
        assert asymptotic_values(np.array([2.0, 0.8]), scalar_model)[0] == np.inf

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_identities_at_random_stable_gains(self, seed, three_state):
        model = three_state.model
        plant = model.plant
        rng = np.random.default_rng(seed)
        L = model.L_star + 0.3 * rng.standard_normal(model.L_star.shape)
        if spectral_radius(plant.closed_loop(L)) >= 0.99:
            return
        W = np.diag(rng.uniform(0.5, 2.0, plant.q))
        ev = asymptotic_eval(L, model, W)
        assert np.array_equal(ev.grad_V_bar, 2.0 * ev.Lam_W @ ev.D)
        assert ev.V_bar >= np.trace(W @ model.S_star) - 1e-12
        Sdot = sigma_bar_direction(L, model, ev.D)
        assert np.linalg.eigvalsh(plant.C @ Sdot @ plant.C.T).min() >= -1e-12 * max(1.0, np.abs(Sdot).max())

    def test_lambda_w_positive_definite(self, two_state):
        ev = asymptotic_eval(two_state.model.L_star + 0.05, two_state.model)
        assert np.linalg.eigvalsh(ev.Lam_W).min() > 0


@pytest.fixture(scope="module")
def table(one_dim):
    grid = np.linspace(0.2, 1.4, 25).reshape(-1, 1, 1)
    return empirical_uniform_convergence(one_dim.model, None, grid, [100, 1000, 10000], range(20))


class TestUniformConvergence:
    def test_decreasing(self, table):
        assert checks.count_inversions([r["sup_value_gap"] for r in table]) <= 1
        assert checks.count_inversions([r["sup_grad_gap"] for r in table]) <= 1

    def test_calibrated_level(self, table):
        assert table[-1]["sup_value_gap"] <= 0.15

    def test_truth_lln(self, one_dim):
        model = one_dim.model
        data, e = simulate_innovation(model, np.zeros((10001, 1)), NoiseSpec.gaussian(model.S_star, seed=21))
        V = pem_value(model.L_star, model.plant, data)
        sq = (e[1:, 0] ** 2)
        assert abs(V - 1.0) <= 3 * sq.std(ddof=1) / np.sqrt(len(sq))


class TestMle:
    def test_value_unit(self, scalar_model):
        data = scalar_data(scalar_model, [0.0, 1.0, -1.0])
        ext = ExtendedData(data, np.zeros((3, 1, 0)))
        theta = MleParams(np.zeros(0), [[0.8]], [[1.0]])
        assert mle_value(theta, scalar_model.plant, ext) == pytest.approx(1.0, abs=1e-15)
        assert covariance_update(theta, scalar_model.plant, ext)[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_s_minimizer(self, three_state, rng):
        plant = three_state.plant
        data = three_state.simulate(400, 3)
        ext = ExtendedData(data, np.zeros((401, 3, 0)))
        L = sample_feasible_gain(plant, 0.02, 1)
        S_hat = covariance_update(MleParams(np.zeros(0), L, np.eye(2)), plant, ext)
        best = mle_value(MleParams(np.zeros(0), L, S_hat), plant, ext)
        for _ in range(20):
            G = 0.1 * rng.standard_normal((2, 2))
            S = S_hat + G @ G.T + 0.05 * rng.standard_normal() * np.eye(2)
            if np.linalg.eigvalsh(S).min() <= 0:
                continue
            assert best <= mle_value(MleParams(np.zeros(0), L, S), plant, ext)

    def test_reduces_to_pem(self, three_state):
        plant = three_state.plant
        data = three_state.simulate(300, 5)
        ext = ExtendedData(data, np.zeros((301, 3, 0)))
        W = np.array([[2.0, 0.4], [0.4, 1.0]])
        L = sample_feasible_gain(plant, 0.02, 2)
        v = mle_value(MleParams(np.zeros(0), L, np.linalg.inv(W)), plant, ext)
        ref = pem_value(L, plant, data, W) + np.linalg.slogdet(np.linalg.inv(W))[1]
        assert v == pytest.approx(ref, rel=1e-12)

    def test_not_pd(self):
        with pytest.raises(ValueError):
            MleParams(np.zeros(0), [[0.8]], [[0.0]])

    def test_noise_free_beta_recovery(self, three_state, rng):
        model = three_state.model
        Phi = rng.standard_normal((201, 3, 2))
        beta = np.array([0.5, -0.3])
        ext, _ = simulate_extended(model, np.zeros((201, 1)), Phi, beta, NoiseSpec.zero())
        b, _ = mle_partial_updates(MleParams(np.zeros(2), model.L_star, np.eye(2)), model.plant, ext)
        assert np.abs(b - beta).max() <= 1e-8

    def test_beta_normal_equations_oracle(self, three_state, rng):
        model = three_state.model
        plant = model.plant
        Phi = rng.standard_normal((301, 3, 2))
        ext, _ = simulate_extended(model, np.zeros((301, 1)), Phi, [0.2, 0.7], NoiseSpec.gaussian(model.S_star, seed=3))
        L = sample_feasible_gain(plant, 0.02, 3)
        S = np.array([[1.3, 0.2], [0.2, 0.8]])
        # residuals are affine in beta: build the Jacobian column by column
        r0 = predict_states_extended(plant, np.zeros(2), L, ext)[1][1:]
        J = [r0 - predict_states_extended(plant, e, L, ext)[1][1:] for e in np.eye(2)]
        Winv = np.linalg.inv(S)
        A = np.array([[np.einsum("ki,ij,kj->", Ja, Winv, Jb) for Jb in J] for Ja in J])
        b = np.array([np.einsum("ki,ij,kj->", Ja, Winv, r0) for Ja in J])
        ref = np.linalg.solve(A, b)
        got = beta_update(MleParams(np.zeros(2), L, S), plant, ext)
        assert np.abs(got - ref).max() <= 1e-8

    def test_singular_regression(self, three_state):
        model = three_state.model
        Phi = np.zeros((51, 3, 2))
        Phi[:, 0, :] = 1.0  # identical columns
        ext = ExtendedData(three_state.simulate(50, 1), Phi)
        with pytest.raises(SingularRegressionError):
            beta_update(MleParams(np.zeros(2), model.L_star, np.eye(2)), model.plant, ext)
