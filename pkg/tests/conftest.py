import numpy as np
import pytest

from vflmid.data import gen_synthetic
from vflmid.diffcore import Rng


def central_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array in ``arrays`` (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


@pytest.fixture(scope="session")
def small_ds():
    return gen_synthetic(400, 4, 12, 0.25, Rng(5).child("data"))


ACCEPTANCE: list[str] = []


@pytest.fixture
def record_criterion():
    """Log a one-line verdict for an acceptance criterion; printed in the terminal summary."""
    def rec(n: int, ok: bool, detail: str):
        ACCEPTANCE.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return rec


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
