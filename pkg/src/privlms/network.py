"""Multitask network topology induced by linear equality constraints.

Agents are indexed from 0.  A constraint ``q`` couples the agents in
``participants`` through ``sum_k blocks[k] @ w_k + offset = 0``.  Each agent's
neighborhood is itself plus every agent it shares a constraint with, and the
local constraint matrix ``D_k`` stacks exactly the constraints that involve
``k``, with columns ordered by ascending agent id inside the neighborhood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._linalg import matrix_rank


class NetworkError(ValueError):
    """Raised for malformed constraint sets."""


@dataclass(frozen=True)
class ConstraintSpec:
    participants: tuple
    blocks: tuple
    offset: np.ndarray

    def __post_init__(self):
        parts = tuple(int(p) for p in self.participants)
        if not parts:
            raise NetworkError("constraint has no participants")
        if len(set(parts)) != len(parts):
            raise NetworkError(f"constraint lists an agent twice: {parts}")
        blocks = tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in self.blocks)
        if len(blocks) != len(parts):
            raise NetworkError("one coefficient block per participant required")
        rows = {b.shape[0] for b in blocks}
        if len(rows) != 1:
            raise NetworkError("coefficient blocks must share a row count")
        offset = np.asarray(self.offset, dtype=float).reshape(-1)
        if offset.size != blocks[0].shape[0]:
            raise NetworkError("offset length must equal the block row count")
        object.__setattr__(self, "participants", parts)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "offset", offset)

    @property
    def n_rows(self):
        return self.blocks[0].shape[0]

    @classmethod
    def scalar(cls, participants, coeffs, b, dim):
        """``sum_k d_qk w_k + b_q 1 = 0`` with ``w_k`` of length ``dim``."""
        eye = np.eye(dim)
        return cls(tuple(participants), tuple(c * eye for c in coeffs), np.full(dim, float(b)))


@dataclass(frozen=True)
class NetworkSpec:
    dims: tuple
    constraints: tuple
    neighborhoods: tuple
    memberships: tuple
    local_D: tuple
    local_b: tuple
    global_D: np.ndarray
    global_b: np.ndarray
    offsets: np.ndarray = field(repr=False)

    @property
    def n_agents(self):
        return len(self.dims)

    @property
    def total_dim(self):
        return int(sum(self.dims))

    def block(self, k):
        """Slice of agent ``k`` inside a stacked network vector."""
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def local_dim(self, k):
        return int(sum(self.dims[l] for l in self.neighborhoods[k]))

    def local_columns(self, k):
        """Global indices of the stacked neighborhood vector of agent ``k``."""
        return np.concatenate([np.arange(self.offsets[l], self.offsets[l + 1]) for l in self.neighborhoods[k]])

    def local_block(self, k, l):
        """Slice of member ``l`` inside agent ``k``'s stacked neighborhood vector."""
        start = 0
        for m in self.neighborhoods[k]:
            if m == l:
                return slice(start, start + self.dims[m])
            start += self.dims[m]
        raise KeyError(f"agent {l} is not a neighbor of {k}")

    def agent_index(self):
        """Agent id of every entry of a stacked network vector."""
        return np.repeat(np.arange(self.n_agents), self.dims)

    def edges(self):
        """Ordered pairs ``(k, l)`` with ``l`` a neighbor of ``k``, ``l != k``."""
        return [(k, l) for k in range(self.n_agents) for l in self.neighborhoods[k] if l != k]

    def adjacency(self):
        n = self.n_agents
        a = np.zeros((n, n), dtype=bool)
        for k, nb in enumerate(self.neighborhoods):
            a[k, list(nb)] = True
        return a


def build_network(constraints, dims):
    """Derive neighborhoods and local/global constraint matrices."""
    dims = tuple(int(m) for m in dims)
    if not dims or any(m <= 0 for m in dims):
        raise NetworkError("dimensions must be positive")
    constraints = tuple(constraints)
    if not constraints:
        raise NetworkError("empty constraint set")
    n = len(dims)
    offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    for q, c in enumerate(constraints):
        for p, blk in zip(c.participants, c.blocks):
            if not 0 <= p < n:
                raise NetworkError(f"constraint {q} references unknown agent {p}")
            if blk.shape[1] != dims[p]:
                raise NetworkError(
                    f"constraint {q}: block for agent {p} has {blk.shape[1]} columns, expected {dims[p]}"
                )

    memberships = tuple(tuple(q for q, c in enumerate(constraints) if k in c.participants) for k in range(n))
    neighborhoods = []
    for k in range(n):
        nb = {k}
        for q in memberships[k]:
            nb.update(constraints[q].participants)
        neighborhoods.append(tuple(sorted(nb)))

    local_D, local_b = [], []
    for k in range(n):
        nb = neighborhoods[k]
        col0 = {}
        start = 0
        for l in nb:
            col0[l] = start
            start += dims[l]
        rows, offs = [], []
        for q in memberships[k]:
            c = constraints[q]
            row = np.zeros((c.n_rows, start))
            for p, blk in zip(c.participants, c.blocks):
                row[:, col0[p]:col0[p] + dims[p]] = blk
            rows.append(row)
            offs.append(c.offset)
        if rows:
            local_D.append(np.vstack(rows))
            local_b.append(np.concatenate(offs))
        else:
            local_D.append(np.zeros((0, start)))
            local_b.append(np.zeros(0))

    total = int(offsets[-1])
    grows, gb = [], []
    for c in constraints:
        row = np.zeros((c.n_rows, total))
        for p, blk in zip(c.participants, c.blocks):
            row[:, offsets[p]:offsets[p + 1]] = blk
        grows.append(row)
        gb.append(c.offset)

    return NetworkSpec(
        dims=dims,
        constraints=constraints,
        neighborhoods=tuple(neighborhoods),
        memberships=memberships,
        local_D=tuple(local_D),
        local_b=tuple(local_b),
        global_D=np.vstack(grows),
        global_b=np.concatenate(gb),
        offsets=offsets,
    )


@dataclass
class Check:
    name: str
    agent: int | None
    passed: bool
    detail: dict

    def as_dict(self):
        return {"name": self.name, "agent": self.agent, "passed": bool(self.passed), **self.detail}


@dataclass
class ValidationReport:
    checks: list
    # agents for which the own-column block of D_k is column-rank deficient
    deficient_agents: list

    @property
    def structural_ok(self):
        """Symmetry, full row rank, column-rank deficiency and feasibility."""
        return all(c.passed for c in self.checks if c.name != "own_block_rank_deficient")

    @property
    def assumption5(self):
        return bool(self.deficient_agents)

    @property
    def ok(self):
        return self.structural_ok

    def failures(self):
        return [c for c in self.checks if not c.passed and c.name != "own_block_rank_deficient"]

    def as_dict(self):
        return {
            "structural_ok": self.structural_ok,
            "assumption5": self.assumption5,
            "deficient_agents": list(self.deficient_agents),
            "checks": [c.as_dict() for c in self.checks],
        }


def validate_assumptions(net):
    """Rank and feasibility checks on the constraint structure.

    The own-block check (some agent whose own columns of ``D_k`` are column-rank
    deficient) is reported per agent; it holds network-wide when at least one
    agent passes it.
    """
    checks = []
    adj = net.adjacency()
    checks.append(Check("neighborhood_symmetry", None, bool(np.array_equal(adj, adj.T)), {}))
    deficient = []
    for k in range(net.n_agents):
        D = net.local_D[k]
        j, cols = D.shape
        r = matrix_rank(D) if j else 0
        checks.append(Check("full_row_rank", k, r == j and j > 0, {"rank": r, "rows": j}))
        checks.append(Check("column_rank_deficient", k, r < cols, {"rank": r, "cols": cols}))
        own = D[:, net.local_block(k, k)]
        r_own = matrix_rank(own) if j else 0
        passed = r_own < net.dims[k]
        if passed:
            deficient.append(k)
        checks.append(Check("own_block_rank_deficient", k, passed, {"rank": r_own, "cols": net.dims[k]}))
    D, b = net.global_D, net.global_b
    r_d = matrix_rank(D)
    r_aug = matrix_rank(np.column_stack([D, b]))
    checks.append(Check("global_feasible", None, r_d == r_aug, {"rank": r_d, "augmented_rank": r_aug}))
    return ValidationReport(checks, deficient)
