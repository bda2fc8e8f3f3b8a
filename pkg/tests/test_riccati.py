import numpy as np
import pytest
import scipy.linalg

from kalmangain.exceptions import NonConvergenceError
from kalmangain.model import NoiseSpec, StateSpaceModel, predict_states, simulate_physical
from kalmangain.riccati import dare_residual, riccati_map, solve_dare, to_innovation_form


def test_memoryless():
    sol = solve_dare([[0.0]], [[1.0]], [[2.0]], [[3.0]])
    assert sol.Sigma[0, 0] == pytest.approx(2.0)
    assert sol.L_star[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert sol.S_star[0, 0] == pytest.approx(5.0)


def test_golden_ratio():
    sol = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    phi = (1 + np.sqrt(5)) / 2
    assert sol.Sigma[0, 0] == pytest.approx(phi, abs=1e-6)
    assert sol.L_star[0, 0] == pytest.approx(phi - 1, abs=1e-6)
    assert sol.S_star[0, 0] == pytest.approx(phi + 1, abs=1e-6)
    assert sol.Sigma[0, 0] ** 2 == pytest.approx(sol.Sigma[0, 0] + 1, abs=1e-9)


def test_zero_process_noise(two_state):
    plant = StateSpaceModel([[0.5, 0.1], [0.0, 0.3]], np.zeros((2, 1)), [[1.0, 0.0]])
    sol = solve_dare(plant.A, plant.C, np.zeros((2, 2)), [[2.0]])
    assert np.allclose(sol.L_star, 0) and sol.S_star[0, 0] == pytest.approx(2.0)


@pytest.mark.parametrize("name", ["two_state", "three_state"])
def test_residual_and_scipy_oracle(name, request):
    system = request.getfixturevalue(name)
    A, C, R = system.plant.A, system.plant.C, system.meas_cov
    Q = system.process_cov()
    sol = solve_dare(A, C, Q, R)
    assert dare_residual(sol.Sigma, A, C, Q, R) <= 1e-9
    # independent oracle: the filtering DARE is the dual control DARE
    ref = scipy.linalg.solve_discrete_are(A.T, C.T, Q, R)
    assert np.abs(sol.Sigma - ref).max() <= 1e-7 * max(1.0, np.abs(ref).max())


def test_riccati_map_fixed_point():
    sol = solve_dare([[0.95]], [[1.0]], [[0.5]], [[1.0]])
    assert riccati_map(sol.Sigma, [[0.95]], [[1.0]], [[0.5]], [[1.0]]) == pytest.approx(sol.Sigma, abs=1e-12)


def test_nonconvergence():
    with pytest.raises(NonConvergenceError):
        solve_dare([[0.99]], [[1.0]], [[1.0]], [[1.0]], max_iter=3)


def test_invalid_R():
    with pytest.raises(ValueError):
        solve_dare([[0.5]], [[1.0]], [[1.0]], [[0.0]])


def test_whiteness(two_state):
    plant, G = two_state.plant, two_state.G
    Qw = two_state.process_noise["cov"]
    model = to_innovation_form(plant, G @ Qw @ G.T, two_state.meas_cov)
    data = simulate_physical(plant, G, NoiseSpec.gaussian(Qw, seed=1), NoiseSpec.gaussian(two_state.meas_cov, seed=2),
                             np.zeros((100_001, 1)))
    _, r = predict_states(plant, model.L_star, data)
    r = r[1000:]  # drop the transient from the zero-covariance start
    S_hat = r.T @ r / len(r)
    assert np.linalg.norm(S_hat - model.S_star, 2) <= 0.05 * np.linalg.norm(model.S_star, 2)
