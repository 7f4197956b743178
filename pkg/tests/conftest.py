from __future__ import annotations

import numpy as np
import pytest

from slaforge.topology import ServiceGraph


def random_connected_graph(rng: np.random.Generator, n: int, extra: float = 0.4) -> ServiceGraph:
    """Random spanning tree plus a few extra edges."""
    order = rng.permutation(n)
    edges = {tuple(sorted((int(order[i]), int(order[rng.integers(i)])))) for i in range(1, n)}
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < extra:
                edges.add((i, j))
    names = [f"n{i}" for i in range(n)]
    return ServiceGraph.from_edges(names, sorted(edges))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# acceptance verdicts are collected here and echoed after the run
_verdicts = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_verdicts] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_verdicts, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    lines = request.config.stash[_verdicts]

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"criterion {label:<3} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record
