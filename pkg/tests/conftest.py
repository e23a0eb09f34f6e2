import numpy as np
import pytest

from sgcalc.space import build_space

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_graph(rng, n, extra=None, lengths=True, measures=True):
    """Connected graph: random spanning tree plus ``extra`` chords."""
    perm = rng.permutation(n)
    edges = {tuple(sorted((int(perm[i]), int(perm[rng.integers(0, i)])))) for i in range(1, n)}
    extra = n // 2 if extra is None else extra
    extra = min(extra, n * (n - 1) // 2 - (n - 1))
    while extra > 0:
        u, v = (int(x) for x in rng.integers(0, n, 2))
        if u != v and tuple(sorted((u, v))) not in edges:
            edges.add(tuple(sorted((u, v))))
            extra -= 1
    edges = sorted(edges)
    lens = rng.uniform(0.5, 2.0, len(edges)) if lengths else np.ones(len(edges))
    mu = rng.uniform(0.5, 2.0, n) if measures else np.ones(n)
    return build_space([(u, v, l) for (u, v), l in zip(edges, lens)], mu, name=f"random({n})")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def p2():
    return build_space([(0, 1, 1.0)])
