"""Monte-Carlo engine for ATP(delta), ATP(0) and non-cooperative LMS.

Runs are processed in fixed-size chunks, vectorized over the runs of a
chunk.  Every random draw comes from a counter-based stream keyed by
``(master seed, run, agent, kind)`` so results do not depend on chunk
scheduling or on the number of worker processes, and all algorithms see the
same tasks, regressors, measurement noise and privacy-noise innovations.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._linalg import psd_sqrt
from .privacy import (
    AdaptiveNoiseState,
    adaptive_update_from_norm,
    network_inference_error,
    single_share_error,
    steady_state_power,
)
from .projection import build_projection_set, compute_weights, identity_projection_set

ALGORITHMS = ("atp_delta", "atp0", "nocoop")
NOISE_SOURCES = ("closed_form", "steady", "adaptive", "schedule")

# stream kinds
TASK, REGRESSOR, MEASUREMENT, PRIVACY = 0, 1, 2, 3
# iterations drawn per call on every stream; part of the seed derivation
TIME_BLOCK = 128


def stream(seed, run, agent, kind):
    """Random generator of one ``(run, agent, kind)`` stream."""
    ss = np.random.SeedSequence(seed, spawn_key=(int(run), int(agent), int(kind)))
    return np.random.Generator(np.random.Philox(ss))


# ------------------------------------------------------------------ single steps

def adapt_step(mu, u, d, w):
    """LMS adaptation ``w + mu u (d - u^T w)``; broadcasts over leading axes."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    e = np.asarray(d, dtype=float) - np.sum(u * w, axis=-1)
    return w + np.asarray(mu, dtype=float)[..., None] * u * e[..., None]


def nocoop_step(mu, u, d, w):
    """Non-cooperative LMS; the adapted estimate is the new estimate."""
    return adapt_step(mu, u, d, w)


def exchange_step(net, psi, noise):
    """Shares seen by every agent.

    ``psi`` and ``noise`` are lists of per-agent vectors.  Returns a list whose
    entry ``k`` maps each neighbor ``l`` to the share agent ``k`` receives: its
    own intermediate estimate for ``l == k`` and ``psi_l + n_l`` otherwise,
    with one noise draw per sender reused for all receivers.
    """
    noisy = [p + n for p, n in zip(psi, noise)]
    return [{l: (psi[l] if l == k else noisy[l]) for l in net.neighborhoods[k]} for k in range(net.n_agents)]


def project_step(net, k, pset, shares):
    """New estimate of agent ``k`` from its received shares."""
    y = np.concatenate([shares[l] for l in net.neighborhoods[k]])
    rows = net.local_block(k, k)
    return pset.local_P[k][rows] @ y - pset.local_f[k][rows]


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class Scenario:
    """Everything that defines the data model of an experiment.

    ``change`` is ``(index, factor)``: from iteration ``index`` on, the task
    deviation from its mean is scaled by ``sqrt(factor)`` so the task
    covariance grows by ``factor``.
    """

    net: object
    prior: object
    model: object
    deltas: np.ndarray
    change: tuple | None = None

    def prior_at(self, i):
        if self.change is not None and i >= self.change[0]:
            return self.prior.scaled(self.change[1])
        return self.prior

    def steady_powers(self, i):
        p = self.prior_at(i)
        return np.array([steady_state_power(p.W(k), self.deltas[k]) for k in range(self.net.n_agents)])


@dataclass(frozen=True)
class MonteCarloPlan:
    runs: int
    iterations: int
    seed: int
    algorithms: tuple = ALGORITHMS
    noise_source: str = "closed_form"
    schedule: np.ndarray | None = None  # (T, N) powers for "closed_form"/"schedule"
    alpha: float = 0.95
    chunk: int = 256
    workers: int = 1
    collect_privacy: bool = True

    def __post_init__(self):
        if self.runs < 1 or self.iterations < 1:
            raise ValueError("runs and iterations must be at least 1")
        if self.chunk < 1 or self.workers < 1:
            raise ValueError("chunk and workers must be at least 1")
        bad = set(self.algorithms) - set(ALGORITHMS)
        if bad or not self.algorithms:
            raise ValueError(f"unknown algorithms {sorted(bad)}")
        if self.noise_source not in NOISE_SOURCES:
            raise ValueError(f"unknown noise source {self.noise_source!r}")
        if self.noise_source == "schedule" and self.schedule is None:
            raise ValueError("noise source 'schedule' needs an explicit schedule")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("forgetting factor must lie in (0, 1)")


@dataclass
class Moments:
    """Pooled count, mean and centered sum of squares per iteration."""

    n: int
    mean: np.ndarray  # (T, L)
    m2: np.ndarray  # (T, L, L)

    @classmethod
    def from_samples(cls, y):
        # y: (B, T, L)
        mean = y.mean(axis=0)
        c = y - mean
        return cls(y.shape[0], mean, np.einsum("btl,btm->tlm", c, c))

    def merge(self, other):
        n = self.n + other.n
        d = other.mean - self.mean
        mean = self.mean + d * (other.n / n)
        m2 = self.m2 + other.m2 + np.einsum("tl,tm->tlm", d, d) * (self.n * other.n / n)
        return Moments(n, mean, m2)

    @property
    def cov(self):
        return self.m2 / max(self.n - 1, 1)


@dataclass
class RunRecord:
    """Aggregated outcome of a Monte-Carlo experiment.

    ``msd`` holds the network MSD per iteration; ``msd_sq`` the run average
    of the squared per-run network MSD (for standard errors).  ``moments``
    holds pooled moments of ``[w, observation]`` per iteration with the
    observation layout of :func:`privlms.privacy.observation_indices`.
    """

    runs: int
    iterations: int
    algorithms: tuple
    msd: dict
    msd_sq: dict
    sigma2: dict  # run-averaged noise power (T, N)
    moments: dict = field(default_factory=dict, repr=False)

    def msd_se(self, algorithm):
        var = np.maximum(self.msd_sq[algorithm] - self.msd[algorithm] ** 2, 0.0)
        return np.sqrt(var / max(self.runs - 1, 1))


# ---------------------------------------------------------------------- engine

class _Chunk:
    """Random inputs of one chunk of runs."""

    def __init__(self, scenario, plan, runs):
        net = scenario.net
        self.runs = runs
        T = plan.iterations
        dims = net.dims
        prior = scenario.prior
        r = prior.latent_dim
        z = np.stack([stream(plan.seed, run, 0, TASK).standard_normal(r) for run in runs])
        self.dev = z @ psd_sqrt(prior.latent_cov) @ prior.basis.T  # (B, M)
        self.mean = prior.particular + prior.basis @ prior.latent_mean
        self.gens = {
            kind: [[stream(plan.seed, run, k, kind) for k in range(net.n_agents)] for run in runs]
            for kind in (REGRESSOR, MEASUREMENT, PRIVACY)
        }
        self.sqrt_ru = [psd_sqrt(R) for R in scenario.model.Ru]
        self.sv = np.sqrt(scenario.model.sigma_v2)
        self.dims = dims
        self.T = T
        self._block = -1

    def _draw(self, kind, start, length, per_agent_dim):
        cols = []
        for k, m in enumerate(self.dims):
            shape = (length, m) if per_agent_dim else (length,)
            cols.append(np.stack([g[k].standard_normal(shape) for g in self.gens[kind]]))
        return cols

    def inputs(self, i):
        """``(u, v, z_priv)`` for iteration ``i``; each ``(B, M)`` or ``(B, N)``."""
        blk = i // TIME_BLOCK
        if blk != self._block:
            start = blk * TIME_BLOCK
            length = min(TIME_BLOCK, self.T - start)
            ureg = self._draw(REGRESSOR, start, length, True)
            self._u = np.concatenate([u @ s for u, s in zip(ureg, self.sqrt_ru)], axis=-1)
            self._v = np.stack(self._draw(MEASUREMENT, start, length, False), axis=-1) * self.sv
            self._z = np.concatenate(self._draw(PRIVACY, start, length, True), axis=-1)
            self._block = blk
        j = i - blk * TIME_BLOCK
        return self._u[:, j], self._v[:, j], self._z[:, j]


class _BatchProjector:
    """Per-run projection for run-dependent noise powers."""

    def __init__(self, net):
        self.net = net
        self.cols = [net.local_columns(k) for k in range(net.n_agents)]
        self.rows = [net.local_block(k, k) for k in range(net.n_agents)]
        self.member_dims = [np.array([net.dims[l] for l in net.neighborhoods[k]]) for k in range(net.n_agents)]

    def __call__(self, psi, shares, sigma2):
        net = self.net
        out = np.empty_like(psi)
        for k in range(net.n_agents):
            nb = net.neighborhoods[k]
            y = shares[:, self.cols[k]].copy()
            own = self.rows[k]
            y[:, own] = psi[:, net.block(k)]
            D, b = net.local_D[k], net.local_b[k]
            if D.shape[0] == 0:
                out[:, net.block(k)] = psi[:, net.block(k)]
                continue
            w = compute_weights(sigma2[:, list(nb)], nb.index(k))
            om = np.repeat(1.0 / np.maximum(w, 1e-12), self.member_dims[k], axis=-1)  # (B, L)
            gram = np.einsum("jl,bl,hl->bjh", D, om, D)
            lam = np.linalg.solve(gram, (y @ D.T + b)[..., None])[..., 0]
            corr = om[:, own] * (lam @ D[:, own])
            out[:, net.block(k)] = y[:, own] - corr
        return out


def _run_chunk(args):
    scenario, plan, runs = args
    net = scenario.net
    model = scenario.model
    N, M, T = net.n_agents, net.total_dim, plan.iterations
    B = len(runs)
    data = _Chunk(scenario, plan, runs)
    agent = net.agent_index()
    E = np.zeros((M, N))
    E[np.arange(M), agent] = 1.0
    mu = model.step_diag

    mean = data.mean
    dev = data.dev
    wo = mean + dev
    change = scenario.change

    algos = plan.algorithms
    w = {a: np.zeros((B, M)) for a in algos}
    msd = {a: np.zeros(T) for a in algos}
    msd_sq = {a: np.zeros(T) for a in algos}
    sig_mean = {a: np.zeros((T, N)) for a in algos}
    samples = {a: [] for a in algos}

    p0 = build_projection_set(net, np.zeros(N)) if "atp0" in algos else None
    batch_proj = _BatchProjector(net)
    adaptive = plan.noise_source == "adaptive"
    state = AdaptiveNoiseState.initial(scenario.deltas, plan.alpha, batch=(B,)) if adaptive else None
    cached = {}

    for i in range(T):
        if change is not None and i == change[0]:
            wo = mean + np.sqrt(change[1]) * dev
        u, v, z = data.inputs(i)
        d = (u * wo) @ E + v
        for a in algos:
            wp = w[a]
            e = d - (u * wp) @ E
            psi = wp + mu * u * (e @ E.T)
            if a == "nocoop":
                new = psi
                obs = new
            elif a == "atp0":
                new = psi @ p0.P.T - p0.f
                obs = psi
            else:
                if adaptive:
                    c = psi - mean
                    state = adaptive_update_from_norm(state, (c * c) @ E, scenario.deltas)
                    s2 = state.sigma2
                    noisy = psi + z * np.sqrt(s2)[:, agent]
                    new = batch_proj(psi, noisy, s2)
                    sig_mean[a][i] = s2.mean(axis=0)
                else:
                    s2 = plan.schedule[i] if plan.noise_source != "steady" else scenario.steady_powers(i)
                    key = s2.tobytes()
                    if key not in cached:
                        cached.clear()
                        cached[key] = build_projection_set(net, s2)
                    ps = cached[key]
                    noisy = psi + z * np.sqrt(s2)[agent]
                    new = psi @ ps.P.T + (noisy - psi) @ ps.P_off.T - ps.f
                    sig_mean[a][i] = s2
                obs = np.concatenate([psi, noisy], axis=1)
            w[a] = new
            err = np.sum((wo - new) ** 2, axis=1) / N
            msd[a][i] = err.sum()
            msd_sq[a][i] = (err * err).sum()
            if plan.collect_privacy:
                samples[a].append(np.concatenate([wo, obs], axis=1))
    moments = {}
    if plan.collect_privacy:
        for a in algos:
            moments[a] = Moments.from_samples(np.stack(samples[a], axis=1))
    for a in algos:
        sig_mean[a] *= B
    return msd, msd_sq, sig_mean, moments


def _chunks(plan):
    return [range(s, min(s + plan.chunk, plan.runs)) for s in range(0, plan.runs, plan.chunk)]


def resolve_schedule(scenario, plan):
    """Fill in the noise-power schedule required by deterministic sources."""
    if plan.noise_source != "closed_form" or plan.schedule is not None or "atp_delta" not in plan.algorithms:
        return plan
    from .theory import NoisePolicy, theory_trajectory

    traj = theory_trajectory(
        scenario.net, scenario.prior, scenario.model, plan.iterations, "atp_delta",
        NoisePolicy("closed_form", scenario.deltas), change=scenario.change,
    )
    return replace(plan, schedule=traj.sigma2)


def run_monte_carlo(plan, scenario):
    """Run all algorithms of ``plan`` and aggregate in a fixed order."""
    plan = resolve_schedule(scenario, plan)
    if plan.schedule is not None:
        sched = np.asarray(plan.schedule, dtype=float)
        if sched.shape[0] < plan.iterations or sched.shape[1] != scenario.net.n_agents or np.any(sched < 0):
            raise ValueError("noise schedule must be nonnegative with shape (iterations, agents)")
    jobs = [(scenario, plan, r) for r in _chunks(plan)]
    if plan.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as ex:
            parts = list(ex.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]

    algos = plan.algorithms
    msd = {a: sum(p[0][a] for p in parts) / plan.runs for a in algos}
    msd_sq = {a: sum(p[1][a] for p in parts) / plan.runs for a in algos}
    sig = {a: sum(p[2][a] for p in parts) / plan.runs for a in algos}
    moments = {}
    if plan.collect_privacy:
        for a in algos:
            acc = parts[0][3][a]
            for p in parts[1:]:
                acc = acc.merge(p[3][a])
            moments[a] = acc
    return RunRecord(plan.runs, plan.iterations, algos, msd, msd_sq, sig, moments)


# ------------------------------------------------------------- empirical privacy

@dataclass
class EmpiricalPrivacy:
    xi: np.ndarray  # (T,)
    single_share: np.ndarray  # (T, N); NaN where not applicable
    single_share_se: np.ndarray  # (T, N)
    flagged: bool


def empirical_privacy(record, net, algorithm):
    """Network inference error estimated from pooled run moments."""
    if net.n_agents < 2:
        raise ValueError("privacy needs at least two agents")
    mom = record.moments.get(algorithm)
    if mom is None:
        raise ValueError(f"no privacy moments recorded for {algorithm!r}")
    M, N = net.total_dim, net.n_agents
    width = mom.mean.shape[1] - M
    if record.runs < 10 * max(net.dims) * 2:
        raise ValueError("too few runs to estimate covariances")
    T = record.iterations
    xi = np.empty(T)
    single = np.full((T, N), np.nan)
    single_se = np.full((T, N), np.nan)
    flagged = False
    cov = mom.cov
    for i in range(T):
        C = cov[i]
        W = C[:M, :M]
        C_wy = C[:M, M:]
        C_yy = C[M:, M:]
        res = network_inference_error(net, algorithm, W, C_wy, C_yy, ridge=1e-8, relative_ridge=True)
        xi[i] = res.network
        flagged |= res.flagged
        if algorithm == "atp_delta" and width == 2 * M:
            for k in range(N):
                bk = net.block(k)
                own = np.arange(bk.start, bk.stop)
                idx = np.concatenate([own, own + 2 * M])
                sub = C[np.ix_(idx, idx)]
                m = net.dims[k]
                single[i, k], fl = single_share_error(
                    sub[:m, :m], sub[:m, m:], sub[m:, m:], ridge=1e-8, relative_ridge=True
                )
                flagged |= fl
                # error covariance of the linear estimate from the share
                gain = np.linalg.solve(sub[m:, m:], sub[:m, m:].T).T
                err_cov = sub[:m, :m] - gain @ sub[:m, m:].T
                single_se[i, k] = np.sqrt(2.0 * np.sum(err_cov * err_cov) / record.runs)
    return EmpiricalPrivacy(xi, single, single_se, flagged)
