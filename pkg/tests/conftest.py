import numpy as np
import pytest

from echo_lab.toyworld import make_world


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at vector ``x`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def world():
    return make_world(4, 6, 8, seed=0)


@pytest.fixture
def small_world():
    return make_world(3, 3, 2, seed=5)


_ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_acceptance(name, ok, detail):
    _ACCEPTANCE.append((name, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
