from __future__ import annotations

import numpy as np
import pytest

from gnnsteal.graph import Graph, generate_sbm


def erdos_renyi(n: int, p: float, seed: int, d: int = 3) -> Graph:
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    hit = rng.random(iu.size) < p
    return Graph(
        n=n,
        edges=np.stack([iu[hit], ju[hit]], axis=1),
        X=rng.normal(size=(n, d)),
        C=rng.integers(0, 2, size=n),
        num_classes=2,
    )


def floyd_warshall(graph: Graph) -> np.ndarray:
    """All-pairs hop distances; inf where unreachable."""
    n = graph.n
    D = np.full((n, n), np.inf)
    np.fill_diagonal(D, 0)
    for u, v in graph.edges:
        D[u, v] = D[v, u] = 1
    for k in range(n):
        D = np.minimum(D, D[:, [k]] + D[[k], :])
    return D


@pytest.fixture
def path5() -> Graph:
    return Graph(
        n=5,
        edges=[(0, 1), (1, 2), (2, 3), (3, 4)],
        X=np.arange(10, dtype=float).reshape(5, 2),
        C=[0, 0, 1, 1, 1],
    )


@pytest.fixture
def two_cliques() -> Graph:
    return generate_sbm((5, 5), 1.0, 0.0, d=4, seed=0, feature_sep=5.0, feature_noise=0.1)


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
