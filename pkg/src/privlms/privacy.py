"""Privacy-noise power design and the linear-estimator privacy error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GUARD_EPS = 1e-9


class InfeasibleThresholdError(ValueError):
    pass


def _check_threshold(W, delta):
    tr = float(np.trace(W))
    if not 0.0 <= delta < tr:
        raise InfeasibleThresholdError(f"privacy threshold {delta:g} outside [0, tr(W)={tr:g})")
    return tr


def thresholds(prior, rho):
    """``delta_k = rho * tr(W_kk)`` for every agent."""
    if not 0.0 <= rho < 1.0:
        raise InfeasibleThresholdError(f"rho must lie in [0, 1), got {rho}")
    n = len(prior.offsets) - 1
    return np.array([rho * np.trace(prior.W(k)) for k in range(n)])


def sufficient_power(U, W, delta):
    """Closed-form noise power ``tr(U^T U) / (tr(W) - delta)`` that meets the privacy constraint."""
    tr = _check_threshold(W, delta)
    return float(np.sum(np.asarray(U) ** 2)) / (tr - delta)


def steady_state_power(W, delta):
    """Limit of :func:`sufficient_power` once the estimate decorrelates from its mean: ``tr(W^2)/(tr(W)-delta)``."""
    tr = _check_threshold(W, delta)
    W = np.asarray(W)
    return float(np.sum(W * W.T)) / (tr - delta)


def llmse_mse(U, Xp, W):
    """Mean-square error of the linear estimator of ``w`` from an observation with
    cross-covariance ``U`` and covariance ``Xp``: ``tr(W) - tr(U Xp^{-1} U^T)``."""
    U = np.atleast_2d(U)
    Xp = np.atleast_2d(Xp)
    gain = np.linalg.solve(Xp, U.T)
    return float(np.trace(W) - np.trace(U @ gain))


def verify_constraint(sigma2, U, X, W, delta):
    U = np.atleast_2d(U)
    X = np.atleast_2d(X)
    Xp = X + sigma2 * np.eye(X.shape[0])
    try:
        leak = float(np.trace(U @ np.linalg.solve(Xp, U.T)))
    except np.linalg.LinAlgError:
        return False
    return leak <= float(np.trace(W)) - delta


@dataclass
class AdaptiveNoiseState:
    """Per-agent adaptive noise-power estimator state.

    Arrays may carry leading batch dimensions (e.g. Monte-Carlo runs).
    ``beta`` tracks ``tr(W^2)``, ``gamma`` tracks ``tr(W)``.
    """

    beta: np.ndarray
    gamma: np.ndarray
    sigma2: np.ndarray
    alpha: float = 0.95

    @classmethod
    def initial(cls, delta, alpha=0.95, batch=()):
        delta = np.asarray(delta, dtype=float)
        shape = tuple(batch) + delta.shape
        return cls(np.zeros(shape), np.broadcast_to(delta, shape).copy(), np.zeros(shape), alpha)


def adaptive_update(state, psi, mean_w, delta):
    """One step of the forgetting-factor noise-power estimator.

    ``psi`` and ``mean_w`` hold one agent's intermediate estimate and task
    mean on the last axis; ``state`` fields have the remaining shape.  The
    outer product ``(psi - mean)(psi - mean)^T`` is rank one, so its trace
    and squared trace reduce to powers of the centered norm.
    """
    x = np.asarray(psi) - np.asarray(mean_w)
    return adaptive_update_from_norm(state, np.sum(x * x, axis=-1), delta)


def adaptive_update_from_norm(state, sq_norm, delta):
    """:func:`adaptive_update` given ``||psi - mean||^2`` directly."""
    a = state.alpha
    tr_r = np.asarray(sq_norm, dtype=float)
    tr_r2 = tr_r * tr_r
    beta = a * state.beta + (1.0 - a) * tr_r2
    gamma = a * state.gamma + (1.0 - a) * tr_r
    gap = gamma - delta
    ok = gap > GUARD_EPS
    ratio = np.where(ok, beta / np.where(ok, gap, 1.0), 0.0)
    ok &= ratio > 0
    sigma2 = np.where(ok, a * state.sigma2 + (1.0 - a) * ratio, state.sigma2)
    return AdaptiveNoiseState(beta, gamma, sigma2, a)


def sample_noise(sigma2, dim, rng, size=None):
    """Zero-mean Gaussian privacy noise with per-entry variance ``sigma2``."""
    shape = () if size is None else tuple(np.atleast_1d(size))
    return np.sqrt(sigma2) * rng.standard_normal(shape + (dim,))


COND_LIMIT = 1e12


def _leakage(U, X, ridge, relative):
    """``tr(U X^{-1} U^T)`` with a ridge fallback for ill-conditioned ``X``."""
    flagged = False
    cond = np.linalg.cond(X)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        scale = np.trace(X) / X.shape[0] if relative else 1.0
        X = X + ridge * scale * np.eye(X.shape[0])
        flagged = True
    return float(np.trace(U @ np.linalg.solve(X, U.T))), flagged


def observation_indices(net, algorithm, k, l):
    """Entries of the stacked observation vector that agent ``l`` holds about agent ``k``.

    The observation vector stacks the intermediate estimates of all agents
    and, for ``"atp_delta"``, the noisy shares after them.  For ``"nocoop"``
    its single block holds the final estimates.
    """
    bk = np.arange(net.offsets[k], net.offsets[k + 1])
    bl = np.arange(net.offsets[l], net.offsets[l + 1])
    if algorithm == "atp_delta":
        return np.concatenate([bk + net.total_dim, bl])
    if algorithm == "atp0":
        return np.concatenate([bk, bl])
    if algorithm == "nocoop":
        return bl
    raise ValueError(f"unknown algorithm {algorithm!r}")


@dataclass
class InferenceError:
    network: float
    per_agent: np.ndarray
    flagged: bool


def network_inference_error(net, algorithm, W, C_wy, C_yy, ridge=1e-10, relative_ridge=False):
    """Average linear-estimator error of neighbors inferring each agent's task.

    ``W`` is the task covariance, ``C_wy`` the task/observation
    cross-covariance and ``C_yy`` the observation covariance, laid out as in
    :func:`observation_indices`.  Agents without neighbors are skipped in the
    network average and reported as NaN.
    """
    flagged = False
    per_agent = np.full(net.n_agents, np.nan)
    for k in range(net.n_agents):
        nbrs = [l for l in net.neighborhoods[k] if l != k]
        if not nbrs:
            continue
        bk = net.block(k)
        errs = []
        for l in nbrs:
            idx = observation_indices(net, algorithm, k, l)
            leak, fl = _leakage(C_wy[bk][:, idx], C_yy[np.ix_(idx, idx)], ridge, relative_ridge)
            flagged |= fl
            errs.append(float(np.trace(W[bk, bk])) - leak)
        per_agent[k] = np.mean(errs)
    return InferenceError(float(np.nanmean(per_agent)), per_agent, flagged)


def single_share_error(W, U, X, ridge=1e-10, relative_ridge=False):
    """Error of inferring a task from its owner's noisy share alone."""
    leak, fl = _leakage(np.atleast_2d(U), np.atleast_2d(X), ridge, relative_ridge)
    return float(np.trace(W)) - leak, fl
