import numpy as np
import pytest

from vitsplit.data import SyntheticDatasetSpec, generate_synthetic
from vitsplit.estimator import fit_base_head
from vitsplit.vit import build_random, preset

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_config():
    return preset("vit-tiny")


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(SyntheticDatasetSpec(num_classes=8, samples_per_class=40, seed=0))


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return build_random(tiny_config, seed=0)


@pytest.fixture(scope="session")
def tiny_trained(tiny_config, tiny_weights, tiny_data):
    """Random body with a linear-probe head fitted on the synthetic data."""
    X, y = tiny_data
    return fit_base_head(tiny_weights, tiny_config, X, y, epochs=10, lr=1e-2, batch_size=32, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
