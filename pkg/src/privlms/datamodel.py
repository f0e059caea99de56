"""Random tasks on the constraint manifold and streaming regression data."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import block_diag

from ._linalg import null_space, psd_sqrt, sym


class InfeasibleConstraintsError(ValueError):
    pass


@dataclass(frozen=True)
class TaskPrior:
    """Gaussian prior ``w = particular + basis @ zeta`` with ``zeta ~ N(latent_mean, latent_cov)``.

    ``basis`` is an orthonormal basis of ``null(global_D)`` so every draw
    satisfies the global constraint system.
    """

    particular: np.ndarray
    basis: np.ndarray
    latent_mean: np.ndarray
    latent_cov: np.ndarray
    offsets: np.ndarray

    @property
    def mean(self):
        return self.particular + self.basis @ self.latent_mean

    @property
    def cov(self):
        return sym(self.basis @ self.latent_cov @ self.basis.T)

    @property
    def second_moment(self):
        m = self.mean
        return self.cov + np.outer(m, m)

    @property
    def latent_dim(self):
        return self.basis.shape[1]

    def block(self, k):
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def W(self, k):
        """Covariance of agent ``k``'s task."""
        s = self.block(k)
        return self.cov[s, s]

    def scaled(self, factor):
        """Prior whose latent covariance is multiplied by ``factor``."""
        return replace(self, latent_cov=self.latent_cov * float(factor))


def make_task_prior(net, latent_cov=None, latent_mean=None):
    D, b = net.global_D, net.global_b
    particular, *_ = np.linalg.lstsq(D, -b, rcond=None)
    if np.max(np.abs(D @ particular + b), initial=0.0) > 1e-8 * (1.0 + np.max(np.abs(b), initial=0.0)):
        raise InfeasibleConstraintsError("constraint system has no solution")
    basis = null_space(D)
    r = basis.shape[1]
    latent_cov = np.eye(r) if latent_cov is None else np.atleast_2d(np.asarray(latent_cov, dtype=float))
    latent_mean = np.zeros(r) if latent_mean is None else np.asarray(latent_mean, dtype=float).reshape(-1)
    if latent_cov.shape != (r, r) or latent_mean.shape != (r,):
        raise ValueError(f"latent moments must have null-space dimension {r}")
    return TaskPrior(particular, basis, latent_mean, latent_cov, np.asarray(net.offsets))


def sample_tasks(prior, rng, size=None):
    """Draw task vectors; ``size`` adds leading sample dimensions."""
    shape = () if size is None else tuple(np.atleast_1d(size))
    z = rng.standard_normal(shape + (prior.latent_dim,))
    zeta = prior.latent_mean + z @ psd_sqrt(prior.latent_cov)
    return prior.particular + zeta @ prior.basis.T


@dataclass(frozen=True)
class AgentSignalModel:
    Ru: tuple
    sigma_v2: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        Ru = tuple(np.atleast_2d(np.asarray(r, dtype=float)) for r in self.Ru)
        for r in Ru:
            if not np.allclose(r, r.T) or np.linalg.eigvalsh(r).min() <= 0:
                raise ValueError("regressor covariances must be symmetric positive definite")
        sigma_v2 = np.asarray(self.sigma_v2, dtype=float).reshape(-1)
        mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (len(Ru),)).copy()
        if np.any(mu <= 0) or np.any(sigma_v2 < 0) or sigma_v2.size != len(Ru):
            raise ValueError("step sizes must be positive and noise variances nonnegative")
        object.__setattr__(self, "Ru", Ru)
        object.__setattr__(self, "sigma_v2", sigma_v2)
        object.__setattr__(self, "mu", mu)

    @property
    def dims(self):
        return tuple(r.shape[0] for r in self.Ru)

    @property
    def step_diag(self):
        """Diagonal of the stacked step-size matrix."""
        return np.repeat(self.mu, self.dims)

    @property
    def calM(self):
        return np.diag(self.step_diag)

    @property
    def calRu(self):
        return block_diag(*self.Ru)

    @property
    def calG(self):
        return block_diag(*(r * s for r, s in zip(self.Ru, self.sigma_v2)))

    def with_step(self, mu):
        return replace(self, mu=mu)


def random_regressor_cov(dim, eig_range, rng):
    """``Q diag(lam) Q^T`` with ``lam ~ U[eig_range]`` and Haar-random ``Q``."""
    lo, hi = eig_range
    lam = rng.uniform(lo, hi, size=dim)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    return sym((q * lam) @ q.T)


def signal_power(model, prior, k):
    """``E[(u_k^T w_k)^2] = tr(R_u,k (W_kk + m_k m_k^T))``."""
    s = prior.block(k)
    m = prior.mean[s]
    return float(np.trace(model.Ru[k] @ (prior.cov[s, s] + np.outer(m, m))))


def calibrate_snr(model, prior, snr_db):
    snr_db = np.broadcast_to(np.asarray(snr_db, dtype=float), (len(model.Ru),))
    if not np.all(np.isfinite(snr_db)):
        raise ValueError("target SNR must be finite")
    power = np.array([signal_power(model, prior, k) for k in range(len(model.Ru))])
    return replace(model, sigma_v2=power / 10.0 ** (snr_db / 10.0))


@dataclass(frozen=True)
class StreamSample:
    u: np.ndarray
    v: float
    d: float


def next_sample(model, w, rng, k):
    """One observation ``d = u^T w_k + v`` for agent ``k``; ``w`` is agent k's task."""
    u = rng.standard_normal(model.dims[k]) @ psd_sqrt(model.Ru[k])
    v = float(np.sqrt(model.sigma_v2[k]) * rng.standard_normal())
    return StreamSample(u, v, float(u @ w + v))
