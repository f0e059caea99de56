import numpy as np
import pytest

from privlms.harness import build_constraints, preset, topology
from privlms.network import ConstraintSpec, NetworkError, build_network, validate_assumptions

from conftest import random_network


def _line(n=12, dim=3):
    return build_network([ConstraintSpec.scalar((q, q + 1), (1.0, -2.0), 1.0, dim) for q in range(n - 1)], [dim] * n)


def test_line_neighborhood_sizes():
    net = _line()
    for k in range(12):
        interior = 0 < k < 11
        assert len(net.neighborhoods[k]) == (3 if interior else 2)
        assert net.local_D[k].shape[0] == (2 if interior else 1) * 3


def test_single_constraint_pair():
    net = build_network([ConstraintSpec.scalar((0, 1), (1.0, -1.0), 0.0, 1)], [1, 1])
    assert net.neighborhoods == ((0, 1), (0, 1))
    assert net.local_D[0].shape == (1, 2)
    assert np.allclose(net.local_D[0], [[1.0, -1.0]])


def test_dense_neighborhoods_match_cooccurrence_scan():
    cfg = preset("dense")
    cons = build_constraints(cfg, np.random.default_rng(0))
    net = build_network(cons, [3] * 12)
    parts = topology("dense", 12)
    for k in range(12):
        expect = {k}
        for p in parts:
            if k in p:
                expect |= set(p)
        assert set(net.neighborhoods[k]) == expect


def test_neighbors_ascending_and_global_zero_blocks():
    net = _line(4, 2)
    assert all(list(nb) == sorted(nb) for nb in net.neighborhoods)
    # first constraint does not touch agents 2 and 3
    assert np.all(net.global_D[:2, 4:] == 0)


def test_difference_constraint_checks():
    net = build_network([ConstraintSpec.scalar((0, 1), (1.0, -1.0), 0.0, 1)], [1, 1])
    rep = validate_assumptions(net)
    by = {(c.name, c.agent): c for c in rep.checks}
    assert by[("full_row_rank", 0)].passed
    assert by[("column_rank_deficient", 0)].passed
    assert rep.structural_ok


def test_identity_own_block_fails_own_block_check():
    net = build_network([ConstraintSpec((0,), (np.eye(2),), np.zeros(2))], [2])
    rep = validate_assumptions(net)
    own = [c for c in rep.checks if c.name == "own_block_rank_deficient"][0]
    assert not own.passed
    assert not rep.assumption5


def test_block_desk_network_meets_own_block_check():
    from privlms.harness import build_scenario

    rep = build_scenario(preset("desk")).report
    assert rep.structural_ok and rep.assumption5


def test_infeasible_system_reported():
    c1 = ConstraintSpec.scalar((0, 1), (1.0, -1.0), 0.0, 1)
    c2 = ConstraintSpec.scalar((0, 1), (1.0, -1.0), 1.0, 1)
    rep = validate_assumptions(build_network([c1, c2], [1, 1]))
    names = {c.name for c in rep.failures()}
    assert "global_feasible" in names and "full_row_rank" in names


@pytest.mark.parametrize(
    "make",
    [
        lambda: ConstraintSpec((), (), []),
        lambda: ConstraintSpec((0, 0), (np.eye(1), np.eye(1)), [0.0]),
        lambda: ConstraintSpec((0, 1), (np.ones((1, 2)), np.ones((2, 2))), [0.0]),
    ],
)
def test_malformed_constraints_rejected(make):
    with pytest.raises(NetworkError):
        make()


def test_dimension_mismatch_and_empty_rejected():
    with pytest.raises(NetworkError):
        build_network([ConstraintSpec.scalar((0, 1), (1.0, 1.0), 0.0, 2)], [2, 3])
    with pytest.raises(NetworkError):
        build_network([], [1])
    with pytest.raises(NetworkError):
        build_network([ConstraintSpec.scalar((0, 5), (1.0, 1.0), 0.0, 1)], [1, 1])


def test_random_networks_symmetric_and_restriction_consistent():
    rng = np.random.default_rng(11)
    for _ in range(100):
        net = random_network(rng)
        adj = net.adjacency()
        assert np.array_equal(adj, adj.T)
        w, *_ = np.linalg.lstsq(net.global_D, -net.global_b, rcond=None)
        from privlms._linalg import null_space

        w = w + null_space(net.global_D) @ rng.standard_normal(null_space(net.global_D).shape[1])
        for k in range(net.n_agents):
            r = net.local_D[k] @ w[net.local_columns(k)] + net.local_b[k]
            assert np.max(np.abs(r), initial=0) < 1e-9
        rep = validate_assumptions(net)
        for c in rep.checks:
            if c.name == "full_row_rank" and net.local_D[c.agent].shape[0]:
                assert c.detail["rank"] == np.linalg.matrix_rank(net.local_D[c.agent])
