"""Weighted projection onto the local constraint manifolds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

WEIGHT_FLOOR = 1e-12
EXP_FLOOR = 1e-300
COND_LIMIT = 1e12


class ProjectionError(np.linalg.LinAlgError):
    pass


def compute_weights(noise_powers, self_pos):
    """Noise-aware combination weights for one neighborhood.

    ``noise_powers`` lists the privacy-noise power of every member in
    neighborhood order; the entry at ``self_pos`` is ignored since an agent
    uses its own estimate un-noised.  Neighbors get ``exp(-sigma2)`` and the
    agent itself gets 1, normalized to sum to one.
    """
    p = np.asarray(noise_powers, dtype=float)
    raw = np.maximum(np.exp(-p), EXP_FLOOR)
    raw[..., self_pos] = 1.0
    return raw / raw.sum(axis=-1, keepdims=True)


def neighborhood_weights(net, k, sigma2):
    nb = net.neighborhoods[k]
    return compute_weights(np.asarray(sigma2)[..., list(nb)], nb.index(k))


def _inverse_weight_diag(weights, member_dims):
    w = np.maximum(np.asarray(weights, dtype=float), WEIGHT_FLOOR)
    return np.repeat(1.0 / w, member_dims, axis=-1)


def build_projector(D, b, weights, member_dims, agent=None):
    """Oblique projector ``P = I - Om D^T (D Om D^T)^{-1} D`` and offset ``f``.

    ``Om`` is diagonal with entry ``1/weight`` on every coordinate of a member,
    so ``P x - f`` minimizes ``sum_l w_l ||x_l - y_l||^2`` subject to
    ``D y + b = 0``.
    """
    om = _inverse_weight_diag(weights, member_dims)
    n = om.size
    if D.shape[0] == 0:
        return np.eye(n), np.zeros(n)
    omDt = om[:, None] * D.T
    gram = D @ omDt
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        who = "" if agent is None else f" for agent {agent}"
        raise ProjectionError(f"weighted constraint Gram matrix is singular{who} (cond={cond:.3g})")
    cho = scipy.linalg.cho_factor(gram)
    P = np.eye(n) - omDt @ scipy.linalg.cho_solve(cho, D)
    f = omDt @ scipy.linalg.cho_solve(cho, b)
    return P, f


@dataclass(frozen=True)
class ProjectionSet:
    """Per-neighborhood projectors plus their network-level assembly."""

    weights: tuple
    local_P: tuple
    local_f: tuple
    P: np.ndarray
    f: np.ndarray
    P_off: np.ndarray  # P with its diagonal blocks zeroed

    def masked_row(self, net, k):
        return self.P_off[net.block(k)]


def assemble_global(net, local_P, local_f, weights=None):
    M = net.total_dim
    P = np.zeros((M, M))
    f = np.zeros(M)
    P_off = np.zeros((M, M))
    for k in range(net.n_agents):
        rows = net.local_block(k, k)
        cols = net.local_columns(k)
        bk = net.block(k)
        P[bk, cols] = local_P[k][rows]
        f[bk] = local_f[k][rows]
        P_off[bk, cols] = local_P[k][rows]
        P_off[bk, bk] = 0.0
    return ProjectionSet(tuple(weights or ()), tuple(local_P), tuple(local_f), P, f, P_off)


def build_projection_set(net, sigma2):
    """Projectors for all agents given the current privacy-noise powers."""
    sigma2 = np.asarray(sigma2, dtype=float)
    weights, Ps, fs = [], [], []
    for k in range(net.n_agents):
        w = neighborhood_weights(net, k, sigma2)
        member_dims = [net.dims[l] for l in net.neighborhoods[k]]
        P, f = build_projector(net.local_D[k], net.local_b[k], w, member_dims, agent=k)
        weights.append(w)
        Ps.append(P)
        fs.append(f)
    return assemble_global(net, Ps, fs, weights)


def identity_projection_set(net):
    """Projection set of the non-cooperative scheme (no projection at all)."""
    M = net.total_dim
    Ps = [np.eye(net.local_dim(k)) for k in range(net.n_agents)]
    fs = [np.zeros(net.local_dim(k)) for k in range(net.n_agents)]
    return ProjectionSet((), tuple(Ps), tuple(fs), np.eye(M), np.zeros(M), np.zeros((M, M)))


def project(net, k, pset, psi_local):
    """Block ``k`` of ``P_k psi_local - f_k`` for a stacked neighborhood vector."""
    rows = net.local_block(k, k)
    return pset.local_P[k][rows] @ psi_local - pset.local_f[k][rows]


def project_local(pset, k, psi_local):
    """Full projected neighborhood vector."""
    return pset.local_P[k] @ psi_local - pset.local_f[k]


def operator_norm(pset, method="svd", tol=1e-13, max_iter=100_000, seed=0):
    """Spectral norm of the assembled projector."""
    P = pset.P if isinstance(pset, ProjectionSet) else np.asarray(pset)
    if method == "svd":
        return float(np.linalg.norm(P, 2))
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    # power iteration on P^T P
    x = np.random.default_rng(seed).standard_normal(P.shape[1])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = P.T @ (P @ x)
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return 0.0
        x = y / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return float(np.sqrt(lam))
