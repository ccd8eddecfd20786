from __future__ import annotations

import math

import numpy as np
import pytest

from dpfilter import lti
from dpfilter.privacy import PrivacyBudget


def random_stable_tf(rng: np.random.Generator, order: int | None = None, radius: float = 0.9) -> lti.RationalTF:
    """SISO filter with poles and zeros drawn inside a disc of the given radius."""
    order = int(rng.integers(1, 4)) if order is None else order

    def roots(k):
        out = []
        while len(out) < k:
            if k - len(out) >= 2 and rng.random() < 0.5:
                r, th = radius * math.sqrt(rng.random()), rng.uniform(0, math.pi)
                out += [r * np.exp(1j * th), r * np.exp(-1j * th)]
            else:
                out.append(rng.uniform(-radius, radius))
        return np.array(out)

    den = np.real(np.poly(roots(order)))
    num = np.real(np.poly(roots(order))) * rng.uniform(0.5, 2.0)
    return lti.RationalTF(num, den)


def random_stable_ss(rng: np.random.Generator, n: int, m: int, p: int, radius: float = 0.95) -> lti.StateSpace:
    A = rng.standard_normal((n, n))
    A *= radius * rng.uniform(0.3, 1.0) / max(abs(np.linalg.eigvals(A)))
    return lti.StateSpace(A, rng.standard_normal((n, m)), rng.standard_normal((p, n)), rng.standard_normal((p, m)))


def dense_impulse(sys: lti.StateSpace, T: int) -> np.ndarray:
    """Markov parameters by explicit powers of A, shape (T, p, m)."""
    out = [sys.D]
    Ak = np.eye(sys.n_states)
    for _ in range(1, T):
        out.append(sys.C @ Ak @ sys.B)
        Ak = Ak @ sys.A
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def budget_ln3():
    return PrivacyBudget(math.log(3.0), 0.05)


@pytest.fixture
def budget_ln2():
    return PrivacyBudget(math.log(2.0), 0.05)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
