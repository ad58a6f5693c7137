from __future__ import annotations

import numpy as np
import pytest

from diffpool import tensor as T
from diffpool.graphs import Graph, augment_features


def fd_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of a pure NumPy scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + step
        hi = f(x)
        x[idx] = old - step
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def tape_grad(build, *arrays):
    """Gradients of the scalar ``build(*params)`` with respect to each input."""
    params = [T.Parameter(f"p{i}", np.array(a, dtype=np.float64)) for i, a in enumerate(arrays)]
    with T.Tape() as tape:
        loss = build(*params)
        T.backward(loss, tape, params)
    return [p.grad for p in params]


def two_triangles() -> np.ndarray:
    """Triangles {0,1,2} and {3,4,5} joined by edge (2,3)."""
    a = np.zeros((6, 6))
    for i, j in [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5), (2, 3)]:
        a[i, j] = a[j, i] = 1.0
    return a


def random_graph(rng: np.random.Generator, n: int, p: float = 0.4, label: int = 0) -> Graph:
    upper = np.triu(rng.random((n, n)) < p, 1)
    a = (upper | upper.T).astype(np.float64)
    return augment_features(Graph(adjacency=a, features=np.zeros((n, 0)), label=label))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, tuple[str, list[str]]] = {}


def record_criterion(number: int, status: str, detail: str) -> None:
    """Record a criterion outcome; repeated calls (parametrized cases) merge, FAIL wins."""
    old_status, details = ACCEPTANCE_LINES.get(number, (status, []))
    if "FAIL" in (old_status, status):
        status = "FAIL"
    ACCEPTANCE_LINES[number] = (status, details + [detail])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        status, details = ACCEPTANCE_LINES[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status:<4} "
                                    + "; ".join(dict.fromkeys(details)))
