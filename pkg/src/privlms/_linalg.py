"""Small dense linear-algebra helpers shared across modules."""

import numpy as np

RANK_RTOL = 1e-10


def vec(a):
    """Column-stacking vectorization."""
    return np.asarray(a).reshape(-1, order="F")


def unvec(v, n_rows):
    return np.asarray(v).reshape(n_rows, -1, order="F")


def matrix_rank(a, rtol=RANK_RTOL):
    """Numerical rank; singular values below ``rtol * s_max`` count as zero."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def null_space(a, rtol=RANK_RTOL):
    """Orthonormal null-space basis with a fixed column sign convention.

    Each column is flipped so that its first entry exceeding 1e-12 in
    magnitude is positive, which makes the basis reproducible across runs.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[1]
    if a.shape[0] == 0:
        basis = np.eye(n)
    else:
        _, s, vt = np.linalg.svd(a, full_matrices=True)
        r = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
        basis = vt[r:].T.copy()
    for j in range(basis.shape[1]):
        nz = np.flatnonzero(np.abs(basis[:, j]) > 1e-12)
        if nz.size and basis[nz[0], j] < 0:
            basis[:, j] *= -1.0
    return basis


def sym(a):
    return 0.5 * (a + a.T)


def spectral_radius(a):
    a = np.asarray(a)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def psd_sqrt(a):
    """Symmetric square root of a PSD matrix (negative eigenvalues clipped)."""
    lam, q = np.linalg.eigh(sym(a))
    return (q * np.sqrt(np.clip(lam, 0.0, None))) @ q.T


def to_db(x, floor_db=-300.0):
    """``10*log10(x)`` with zeros mapped to ``floor_db``."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 10.0 * np.log10(x)
    out = np.where(x > 0, out, floor_db)
    out = np.where(np.isnan(x), np.nan, out)
    return np.maximum(out, floor_db)
