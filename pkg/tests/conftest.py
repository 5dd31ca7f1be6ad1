import numpy as np
import pytest

from firescope import synthetic

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthetic.make_dataset(8, 32, seed=7)


@pytest.fixture(scope="session")
def cirrus_dataset():
    return synthetic.make_dataset(40, 16, ("B3", "B6", "B7", "B9"), seed=11,
                                  fire_fraction=0.5, cirrus_fraction=0.8)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
