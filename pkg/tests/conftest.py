import numpy as np
import pytest

from sigcorr.model import MeasurementChannel, SystemModel
from sigcorr.reference import QubitExampleParams, qubit_model


def random_operator(rng, d, scale=1.0):
    return scale * (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))) / np.sqrt(2 * d)


def random_hermitian(rng, d, scale=1.0):
    A = random_operator(rng, d, scale)
    return (A + A.conj().T) / 2


def random_density(rng, d):
    A = random_operator(rng, d)
    rho = A @ A.conj().T + 1e-3 * np.eye(d)
    return rho / np.trace(rho).real


def random_model(seed, d=None, n_channels=2, with_decay=True):
    """Generic model with a Hamiltonian, an optional unmonitored decay and
    monitored channels of random efficiency."""
    rng = np.random.default_rng(seed)
    d = d or int(rng.integers(2, 4))
    decay = (random_operator(rng, d, 0.7),) if with_decay else ()
    channels = tuple(
        MeasurementChannel(f"c{k}", random_operator(rng, d, 0.8), float(rng.uniform(0.3, 1.0)))
        for k in range(n_channels)
    )
    return SystemModel(dim=d, hamiltonian=random_hermitian(rng, d), decay=decay, channels=channels)


@pytest.fixture
def qubit():
    return qubit_model(QubitExampleParams())


@pytest.fixture
def params():
    return QubitExampleParams()


@pytest.fixture
def white_noise_model():
    return SystemModel(dim=2, channels=(MeasurementChannel("w", np.zeros((2, 2)), 1.0),))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
