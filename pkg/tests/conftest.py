import numpy as np
import pytest

from mlposc import lqg
from mlposc.problems import memory_limited_lqg


@pytest.fixture(scope="session")
def memlim():
    return memory_limited_lqg()


@pytest.fixture(scope="session")
def memlim_bundle(memlim):
    return lqg.solve_po_riccati_sweep(memlim, 1e-3, tol=1e-10, max_iter=500)


def scalar_problem(A=1.0, B=1.0, sigma=1.0, Q=1.0, R=1.0, P=0.0, T=1.0, kappa=1.0, H=1.0, gamma=1.0, M=1.0,
                   x_var0=1.0, z_var0=1.0):
    return memory_limited_lqg(A=A, B=B, sigma=sigma, H=H, gamma=gamma, kappa=kappa, Q=Q, R=R, M=M, P=P, T=T,
                              x_var0=x_var0, z_var0=z_var0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    """Log one acceptance criterion outcome; the lines are printed in the terminal summary."""
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
