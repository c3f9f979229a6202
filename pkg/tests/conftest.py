import numpy as np
import pytest

from bc3e.synth import sample_dataset, standard_spec

ACCEPTANCE_LINES = []


def record_acceptance(name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def seed42():
    """N=500, k=3, r1=3, two 3-cluster clusterings."""
    spec = standard_spec()
    return spec, sample_dataset(spec)


@pytest.fixture(scope="session")
def small():
    spec = standard_spec(n_instances=60, seed=7)
    return spec, sample_dataset(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
