import numpy as np
import pytest

from smoothsparse.model import init_model_params

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def patch_matrix(h, w, side, i, j):
    """Dense ``P_k`` (d x hw) for the patch centred at ``(i, j)``, circular."""
    r = side // 2
    P = np.zeros((side * side, h * w))
    t = 0
    for a in range(side):
        for b in range(side):
            P[t, ((i + a - r) % h) * w + (j + b - r) % w] = 1.0
            t += 1
    return P


def all_patch_matrices(h, w, side):
    return [patch_matrix(h, w, side, i, j) for i in range(h) for j in range(w)]


def dense_gram(h, w, Q):
    """``sum_k P_k^T (I - QQ^T)^2 P_k`` as a dense matrix."""
    d = Q.shape[0]
    side = int(round(np.sqrt(d)))
    Pi = np.eye(d) - Q @ Q.T
    Pi2 = Pi @ Pi
    A = np.zeros((h * w, h * w))
    for P in all_patch_matrices(h, w, side):
        A += P.T @ Pi2 @ P
    return A


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cpr():
    return init_model_params(side=3, p1=4, p2=2, kind="cpr", tau0=0.02, beta0=1.0, seed=3)


@pytest.fixture
def tiny_ncpr():
    return init_model_params(side=3, p1=4, p2=2, kind="ncpr", gamma=1.0, tau0=0.05,
                             beta0=1.0, seed=3)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
