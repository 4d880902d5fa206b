import numpy as np
import pytest

from hodlrgp.kernels import KernelParams


def si_points(n=200, seed=0):
    """Sorted uniform(0, 1) inputs used by the rank example."""
    return np.sort(np.random.default_rng(seed).uniform(0.0, 1.0, n))[:, None]


def se_dense(X, sigma_f_sq, rho):
    # independent oracle: direct double loop over the closed form
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    n = len(X)
    K = np.empty((n, n))
    for i in range(n):
        d = X - X[i]
        K[i] = sigma_f_sq * np.exp(-rho * np.sum(d * d, axis=1))
    return K


@pytest.fixture
def si_params():
    return KernelParams(1.0, 4.0, 0.0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
