import numpy as np
from hypothesis import given, settings, strategies as st

from privlms._linalg import matrix_rank, null_space, to_db, unvec, vec


def _mat(seed, r, c):
    return np.random.default_rng(seed).standard_normal((r, c))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_kronecker_vec_identity(seed, a, b, c):
    A, C, B = _mat(seed, a, b), _mat(seed + 1, b, c), _mat(seed + 2, c, a)
    assert np.allclose(vec(A @ C @ B), np.kron(B.T, A) @ vec(C), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_trace_vec_identity(seed, n, m):
    A, B = _mat(seed, n, m), _mat(seed + 1, m, n)
    assert abs(np.trace(A @ B) - vec(B.T) @ vec(A)) < 1e-12 * (1 + np.abs(A).sum() * np.abs(B).sum())


def test_unvec_inverts_vec():
    A = _mat(0, 3, 4)
    assert np.array_equal(unvec(vec(A), 3), A)


def _rank_by_elimination(a, tol=1e-10):
    a = np.array(a, dtype=float)
    scale = np.abs(a).max() if a.size else 0.0
    rank, row = 0, 0
    for col in range(a.shape[1]):
        if row == a.shape[0]:
            break
        piv = row + np.argmax(np.abs(a[row:, col]))
        if abs(a[piv, col]) <= tol * max(scale, 1.0):
            continue
        a[[row, piv]] = a[[piv, row]]
        a[row + 1:] -= np.outer(a[row + 1:, col] / a[row, col], a[row])
        row += 1
        rank += 1
    return rank


def test_rank_matches_elimination_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        r, c = rng.integers(1, 7, size=2)
        k = rng.integers(0, min(r, c) + 1)
        a = rng.standard_normal((r, k)) @ rng.standard_normal((k, c))
        assert matrix_rank(a) == _rank_by_elimination(a) == k


def test_null_space_sign_convention_and_orthonormality():
    D = np.array([[1.0, -1.0, 0.0], [0.0, 1.0, 2.0]])
    Z = null_space(D)
    assert Z.shape == (3, 1)
    assert np.allclose(D @ Z, 0, atol=1e-12)
    assert np.allclose(Z.T @ Z, np.eye(1))
    first = Z[np.argmax(np.abs(Z[:, 0]) > 1e-12), 0]
    assert first > 0


def test_to_db_floor_and_nan():
    out = to_db(np.array([1.0, 10.0, 0.0, np.nan]))
    assert out[0] == 0.0 and out[1] == 10.0 and out[2] == -300.0 and np.isnan(out[3])
