import numpy as np
import pytest

from mlvi_mpc.model import make_case_study

# Independent re-implementation of the case-study plant straight from its printed
# definition, used as an oracle against the package code.
P_CASE = np.array([[5.0, 1.0], [1.0, 3.0]])
Q_CASE = np.diag([2.0, 1.0])
M_LEFT = np.array([[0.4608, -0.044], [-0.044, 1.1641]])
M_RIGHT = np.array([[1.7013, 0.3249], [0.3249, 1.3764]])


def ref_drift(X):
    """Vectorised drift for states of shape (..., 2)."""
    X = np.asarray(X, dtype=float)
    x1, x2 = X[..., 0], X[..., 1]
    a1 = 1.0 + x1 ** 2
    a2 = x1 * x2
    b = np.sqrt(a1 ** 2 + a2 ** 2)
    z = X @ M_RIGHT.T
    y1 = (a1 * z[..., 0] - a2 * z[..., 1]) / b
    y2 = (a2 * z[..., 0] + a1 * z[..., 1]) / b
    return np.stack([M_LEFT[0, 0] * y1 + M_LEFT[0, 1] * y2, M_LEFT[1, 0] * y1 + M_LEFT[1, 1] * y2], axis=-1)


def ref_step(X, u):
    nxt = ref_drift(X)
    nxt[..., 1] += u
    return nxt


def ref_utility(X, u):
    return 2.0 * X[..., 0] ** 2 + X[..., 1] ** 2 + u ** 2


def ref_cost(x0, U, W=None):
    """N-step cost for a batch of input sequences ``U`` of shape (k, N)."""
    U = np.atleast_2d(U)
    X = np.repeat(np.asarray(x0, dtype=float)[None, :], U.shape[0], axis=0)
    J = np.zeros(U.shape[0])
    for k in range(U.shape[1]):
        J += ref_utility(X, U[:, k])
        X = ref_step(X, U[:, k])
    if W is not None:
        J += np.einsum("ki,ij,kj->k", X, W, X)
    return J


def grid_refine_min(x0, N, W=None, span=6.0, pts=13, rounds=14, shrink=0.35):
    """Coarse-to-fine exhaustive search over N-dimensional input sequences."""
    centre = np.zeros(N)
    half = span
    best = None
    for _ in range(rounds):
        axes = [np.linspace(c - half, c + half, pts) for c in centre]
        Z = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        J = ref_cost(x0, Z, W)
        i = int(np.argmin(J))
        best = (float(J[i]), Z[i].copy())
        centre = Z[i]
        half *= shrink
    return best


@pytest.fixture(scope="session")
def case():
    return make_case_study()


@pytest.fixture(scope="session")
def model(case):
    return case[0]


@pytest.fixture(scope="session")
def oracle(case):
    return case[1]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
