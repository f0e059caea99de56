import numpy as np
import pytest

from privlms.network import ConstraintSpec, build_network
from privlms.harness import build_scenario, preset

ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_network(rng, n_agents=None, max_dim=3, form=None):
    """Random feasible constraint network with full-row-rank local systems."""
    while True:
        n = int(n_agents or rng.integers(2, 7))
        dims = rng.integers(1, max_dim + 1, size=n).tolist()
        q = int(rng.integers(1, n + 1))
        cons = []
        for _ in range(q):
            size = int(rng.integers(1, min(n, 4) + 1))
            parts = sorted(rng.choice(n, size=size, replace=False).tolist())
            f = form or rng.choice(["scalar", "block"])
            if f == "scalar":
                m = min(dims[p] for p in parts)
                if any(dims[p] != m for p in parts):
                    f = "block"
            if f == "scalar":
                coeffs = rng.choice([-1, 1], size=size) * rng.uniform(1, 3, size=size)
                cons.append(ConstraintSpec.scalar(parts, coeffs, rng.uniform(-2, 2), dims[parts[0]]))
            else:
                rows = int(rng.integers(1, min(dims[p] for p in parts) + 1))
                blocks = tuple(rng.standard_normal((rows, dims[p])) for p in parts)
                cons.append(ConstraintSpec(parts, blocks, rng.uniform(-2, 2, size=rows)))
        net = build_network(cons, dims)
        ok = all(D.shape[0] == 0 or np.linalg.matrix_rank(D) == D.shape[0] for D in net.local_D)
        if ok and np.linalg.matrix_rank(net.global_D) == net.global_D.shape[0]:
            return net


@pytest.fixture(scope="session")
def desk():
    return build_scenario(preset("desk"))


@pytest.fixture(scope="session")
def desk_small():
    return build_scenario(preset("desk", runs=600, iterations=60))
