import numpy as np
import pytest

from kalmangain.experiments import ExperimentConfig, build_system
from kalmangain.model import InnovationModel, StateSpaceModel


@pytest.fixture(scope="session")
def scalar_plant():
    return StateSpaceModel([[0.9]], [[1.0]], [[1.0]])


@pytest.fixture(scope="session")
def scalar_model(scalar_plant):
    return InnovationModel(scalar_plant, [[0.8]], [[1.0]])


@pytest.fixture(scope="session")
def one_dim():
    return build_system(ExperimentConfig(example="one_dim"))


@pytest.fixture(scope="session")
def two_state():
    return build_system(ExperimentConfig(example="two_state"))


@pytest.fixture(scope="session")
def three_state():
    return build_system(ExperimentConfig(example="three_state"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class FixedNoise:
    """Noise source replaying a given innovation sequence."""

    def __init__(self, e):
        self.e = np.atleast_2d(np.asarray(e, dtype=float))
        if self.e.shape[0] == 1 and self.e.size > 1:
            self.e = self.e.T

    def draw(self, n_samples, dim):
        assert self.e.shape == (n_samples, dim)
        return self.e.copy()


_ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of an acceptance criterion: ``criterion(number, passed, detail)``."""

    def record(number, passed, detail=""):
        _ACCEPTANCE[number] = (bool(passed), detail)
        line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
