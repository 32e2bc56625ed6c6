import numpy as np
import pytest

from msdg.config import RunConfig

# filled by test_acceptance.py; printed once the session ends
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return RunConfig(patch=3, d_spa=4, d_cha=3, d_c=6, d_i=8, heads=2, adv_layers=3, adv_width=4,
                     batch_size=8, epochs=2, t_pre=0, t_adv=1, seed=7)


@pytest.fixture
def tiny_data():
    rng = np.random.default_rng(99)
    n, m, n1, n2, C = 24, 3, 5, 2, 3
    X1 = rng.uniform(size=(n, m, m, n1))
    X2 = rng.uniform(size=(n, m, m, n2))
    y = np.arange(n) % C
    X1[..., 0] += 0.3 * y[:, None, None]
    return np.clip(X1, 0, 1), X2, y
