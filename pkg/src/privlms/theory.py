"""Analytic mean, mean-square and privacy recursions under Gaussian data.

All expectations over one time step's regressors are evaluated exactly with
Isserlis' theorem, so every recursion here is exact (not a small step-size
approximation) when the data model is Gaussian.  Second moments are
propagated as ``M x M`` matrices; the ``M^2 x M^2`` Kronecker objects are
only formed where a result is defined through them (steady state and the
mixed-moment set).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg

from ._linalg import spectral_radius, sym, vec
from .privacy import network_inference_error, single_share_error, steady_state_power, sufficient_power
from .projection import build_projection_set, identity_projection_set

DEFAULT_CAP = 64
ALGORITHMS = ("atp_delta", "atp0", "nocoop")


class InstabilityError(ArithmeticError):
    def __init__(self, radius):
        super().__init__(f"moment recursion is unstable: spectral radius {radius:.6g} >= 1")
        self.radius = radius


class DimensionCapError(ValueError):
    pass


def _check_cap(M, cap):
    if cap is not None and M > cap:
        raise DimensionCapError(f"network dimension {M} exceeds theory cap {cap}")


def gaussian_fourth_moment(R):
    """``E[u u^T (x) u u^T]`` for ``u ~ N(0, R)``, in ``np.kron`` index layout."""
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    t1 = np.kron(R, R)
    t2 = np.einsum("ac,bd->acbd", R, R).reshape(n * n, n * n)
    t3 = np.einsum("ad,bc->acbd", R, R).reshape(n * n, n * n)
    return t1 + t2 + t3


def quad_form_moment(R, S):
    """``E[u u^T S u u^T] = R S R + R S^T R + R tr(S R)`` for ``u ~ N(0, R)``."""
    return R @ S @ R + R @ S.T @ R + R * np.trace(S @ R)


class GaussianStep:
    """Expectations over one draw of the block-diagonal regressor matrix.

    ``R`` below is ``blockdiag(u_k u_k^T)`` and ``A = I - M R`` with ``M`` the
    step-size matrix.
    """

    def __init__(self, model):
        self.blocks = model.Ru
        dims = model.dims
        off = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self.slices = [slice(off[k], off[k + 1]) for k in range(len(dims))]
        self.Ru = model.calRu
        self.step = model.step_diag
        self.G = model.calG
        self.MRu = self.step[:, None] * self.Ru

    @property
    def dim(self):
        return self.Ru.shape[0]

    def e_rsr(self, S):
        """``E[R S R]``."""
        out = self.Ru @ S @ self.Ru
        for sl, Rk in zip(self.slices, self.blocks):
            Skk = S[sl, sl]
            out[sl, sl] += Rk @ Skk.T @ Rk + Rk * np.trace(Skk @ Rk)
        return out

    def e_asa(self, S):
        """``E[A S A^T]``."""
        m = self.step
        return S - self.MRu @ S - (S @ self.Ru) * m[None, :] + m[:, None] * self.e_rsr(S) * m[None, :]

    def e_asr(self, S):
        """``E[A S R]``."""
        return S @ self.Ru - self.step[:, None] * self.e_rsr(S)

    def kron_rr(self):
        """``E[R (x) R]`` in ``np.kron`` layout."""
        M = self.dim
        out = np.kron(self.Ru, self.Ru)
        for sl, Rk in zip(self.slices, self.blocks):
            idx = np.arange(sl.start, sl.stop)
            flat = (idx[:, None] * M + idx[None, :]).ravel()
            out[np.ix_(flat, flat)] += gaussian_fourth_moment(Rk) - np.kron(Rk, Rk)
        return out

    def kron_aa(self):
        """``Z = E[A (x) A]``."""
        M = self.dim
        eye = np.eye(M)
        mm = np.kron(self.step, self.step)
        return np.eye(M * M) - np.kron(eye, self.MRu) - np.kron(self.MRu, eye) + mm[:, None] * self.kron_rr()


def gamma_matrix(pset, sigma2, dims):
    """Covariance of the projected neighbor noise, ``P_off R_n P_off^T``."""
    rn = np.repeat(np.asarray(sigma2, dtype=float), dims)
    return sym((pset.P_off * rn[None, :]) @ pset.P_off.T)


# ---------------------------------------------------------------- mean behavior

def mean_recursion(model, prior, psets):
    """``E w~(i) = P(i)(I - M R_u) E w~(i-1)`` from ``E w~(-1) = E w``.

    Returns an array of shape ``(len(psets), M)``.
    """
    ew = prior.mean.copy()
    out = []
    A0 = np.eye(len(ew)) - model.step_diag[:, None] * model.calRu
    for ps in psets:
        ew = ps.P @ (A0 @ ew)
        out.append(ew)
    return np.array(out)


def mean_matrix(model, pset):
    return pset.P @ (np.eye(pset.P.shape[0]) - model.step_diag[:, None] * model.calRu)


def mean_spectral_radius(model, pset):
    """Spectral radius of the mean-error transition; above one the mean diverges."""
    return spectral_radius(mean_matrix(model, pset))


@dataclass
class StabilityBounds:
    lower: np.ndarray
    upper: np.ndarray
    hypothesis: np.ndarray  # per agent: (1-1/p)/(1+1/p) < lam_min/lam_max
    pnorm: float

    def contains(self, mu):
        mu = np.broadcast_to(np.asarray(mu, dtype=float), self.lower.shape)
        return bool(np.all((self.lower < mu) & (mu < self.upper)))

    @property
    def warning(self):
        return not bool(np.all(self.hypothesis))

    def as_dict(self):
        return {
            "pnorm": self.pnorm,
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "hypothesis_ok": self.hypothesis.tolist(),
        }


def stability_bounds(Ru, pnorm):
    """Sufficient step-size interval for mean stability given ``||P||``."""
    lo, hi, hyp = [], [], []
    inv = 1.0 / pnorm
    for R in Ru:
        lam = np.linalg.eigvalsh(R)
        lo.append((1.0 - inv) / lam[0])
        hi.append((1.0 + inv) / lam[-1])
        hyp.append((1.0 - inv) / (1.0 + inv) < lam[0] / lam[-1])
    return StabilityBounds(np.array(lo), np.array(hi), np.array(hyp), float(pnorm))


# ---------------------------------------------------------- mean-square behavior

def msd_transient(model, prior, psets, gammas, cap=DEFAULT_CAP):
    """Network MSD curve from the error second-moment recursion

    ``K(i) = P E[A K(i-1) A^T] P^T + P M G M P^T + Gamma(i)``, ``K(-1) = E[w w^T]``.
    """
    M = prior.mean.size
    _check_cap(M, cap)
    step = GaussianStep(model)
    n = len(model.Ru)
    mgm = step.step[:, None] * step.G * step.step[None, :]
    K = prior.second_moment
    out = []
    for ps, gam in zip(psets, gammas):
        K = sym(ps.P @ step.e_asa(K) @ ps.P.T + ps.P @ mgm @ ps.P.T + gam)
        out.append(np.trace(K) / n)
    return np.array(out)


@dataclass
class SteadyState:
    msd: float
    msd_approx: float
    radius: float
    radius_approx: float
    sigma_ss: np.ndarray = field(repr=False)


def _radius(F):
    if F.shape[0] <= 400:
        return spectral_radius(F)
    try:
        vals = scipy.sparse.linalg.eigs(F, k=1, which="LM", return_eigenvectors=False, tol=1e-10, maxiter=20000)
        return float(np.abs(vals[0]))
    except scipy.sparse.linalg.ArpackNoConvergence:
        return spectral_radius(F)


def kron_F(model, pset, approx=False):
    """``F = E[(A^T P^T) (x) (A^T P^T)]``; ``approx`` drops the fourth-moment term."""
    if approx:
        A = mean_matrix(model, pset)
        return np.kron(A.T, A.T)
    Z = GaussianStep(model).kron_aa()
    return (np.kron(pset.P, pset.P) @ Z).T


def steady_state_msd(model, pset, gamma, cap=DEFAULT_CAP):
    """Steady-state network MSD with exact and small step-size ``F``."""
    M = pset.P.shape[0]
    _check_cap(M, cap)
    n = len(model.Ru)
    m = model.step_diag
    forcing = vec(pset.P @ (m[:, None] * model.calG * m[None, :]) @ pset.P.T) + vec(gamma)
    results = []
    for approx in (False, True):
        F = kron_F(model, pset, approx=approx)
        r = _radius(F)
        if r >= 1.0:
            raise InstabilityError(r)
        s = np.linalg.solve(np.eye(M * M) - F, vec(np.eye(M))) / n
        results.append((float(forcing @ s), r, s))
    (msd, r, s), (msd_a, r_a, _) = results
    return SteadyState(msd, msd_a, r, r_a, s)


# ------------------------------------------------------------------ mixed moments

@dataclass
class MixedMomentSet:
    H: np.ndarray
    X: np.ndarray
    Xp: np.ndarray
    Y: np.ndarray
    Yp: np.ndarray
    Z: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    C3: np.ndarray
    C4: np.ndarray

    @property
    def c(self):
        return vec(self.C1) - vec(self.C2) - vec(self.C3) + vec(self.C4)

    def step(self, Psi, Epsi, Gamma):
        """Second moment of the next intermediate estimate, Kronecker form."""
        M = Epsi.size
        v = self.H @ vec(Psi) + self.Z @ vec(Gamma) + self.c + (self.Y - self.X - self.Xp + self.Yp) @ Epsi
        return v.reshape(M, M, order="F")


def mixed_moments(model, pset, prior, cap=DEFAULT_CAP):
    M = pset.P.shape[0]
    _check_cap(M, cap)
    step = GaussianStep(model)
    P, f, m = pset.P, pset.f[:, None], prior.mean[:, None]
    mu = step.step
    Z = step.kron_aa()
    rr = np.kron(mu, mu)[:, None] * step.kron_rr()
    eye = np.eye(M)
    C2 = step.e_asr(f @ m.T) * mu[None, :]
    C4 = mu[:, None] * (step.e_rsr(prior.second_moment) + step.G) * mu[None, :]
    return MixedMomentSet(
        H=Z @ np.kron(P, P),
        X=Z @ np.kron(f, P),
        Xp=Z @ np.kron(P, f),
        Y=(np.kron(step.MRu, eye) - rr) @ np.kron(m, P),
        Yp=(np.kron(eye, step.MRu) - rr) @ np.kron(P, m),
        Z=Z,
        C1=step.e_asa(f @ f.T),
        C2=C2,
        C3=C2.T,
        C4=C4,
    )


# --------------------------------------------------------------- joint recursion

@dataclass
class TheoryTrajectory:
    """Exact per-iteration moments of one algorithm."""

    algorithm: str
    msd: np.ndarray
    xi: np.ndarray
    sigma2: np.ndarray
    single_share_error: np.ndarray
    mean_error: np.ndarray
    ukk: list
    V_diag_norm: np.ndarray
    ridge_flagged: bool = False
    psets: list = field(default_factory=list, repr=False)
    gammas: list = field(default_factory=list, repr=False)
    V: list = field(default_factory=list, repr=False)  # Cov(w) - Cov(w, psi(i))
    Psi: list = field(default_factory=list, repr=False)  # second moment of psi(i) used for privacy
    Epsi: list = field(default_factory=list, repr=False)


def observation_moments(algorithm, cov_wpsi, cov_psi, sigma2, dims):
    """Task/observation cross-covariance and observation covariance.

    For ``"atp_delta"`` the observation stacks the intermediate estimates and
    the noisy shares; otherwise it is ``cov_psi`` itself.
    """
    if algorithm != "atp_delta":
        return cov_wpsi, cov_psi
    rn = np.repeat(np.asarray(sigma2, dtype=float), dims)
    C_yy = np.block([[cov_psi, cov_psi], [cov_psi, cov_psi + np.diag(rn)]])
    return np.hstack([cov_wpsi, cov_wpsi]), C_yy


def single_share_errors(net, cov_wpsi, cov_psi, W, sigma2):
    out = np.empty(net.n_agents)
    for k in range(net.n_agents):
        bk = net.block(k)
        X = cov_psi[bk, bk] + sigma2[k] * np.eye(net.dims[k])
        out[k], _ = single_share_error(W[bk, bk], cov_wpsi[bk, bk], X)
    return out


class NoisePolicy:
    """Privacy-noise power per agent at each iteration of the analytic model.

    ``source`` is ``"closed_form"`` (sufficient power from the exact
    cross-covariance), ``"steady"`` (limit power for the current task
    covariance), ``"schedule"`` (a given ``(T, N)`` array) or ``"zero"``.
    """

    def __init__(self, source, deltas=None, schedule=None):
        if source not in ("closed_form", "steady", "schedule", "zero"):
            raise ValueError(f"unknown noise source {source!r}")
        self.source = source
        self.deltas = None if deltas is None else np.asarray(deltas, dtype=float)
        self.schedule = None if schedule is None else np.asarray(schedule, dtype=float)

    def __call__(self, i, ukk, W_blocks):
        n = len(W_blocks)
        if self.source == "zero":
            return np.zeros(n)
        if self.source == "schedule":
            return self.schedule[i].copy()
        if self.source == "steady":
            return np.array([steady_state_power(W_blocks[k], self.deltas[k]) for k in range(n)])
        return np.array([sufficient_power(ukk[k], W_blocks[k], self.deltas[k]) for k in range(n)])


def theory_trajectory(net, prior, model, T, algorithm="atp_delta", noise=None, change=None,
                      form="exact", cap=DEFAULT_CAP, keep_sets=False):
    """Propagate the exact joint moments of ``(psi(i), w)`` for ``T`` iterations.

    State after projection at iteration ``i`` is the triple
    ``(E w(i), E[w(i) w(i)^T], E[w(i) w^T])``; one adaptation step maps it to
    ``(E psi, Psi, S = E[psi w^T])`` which yields the privacy quantities, and
    the projection step maps back.  ``form="printed"`` additionally
    propagates a second-moment chain in which the ``psi``-``w`` cross moment
    is replaced by the product of means, the chain generated by
    :func:`mixed_moments`, and uses it for the observation covariances of
    the privacy error; MSD and cross-covariances stay exact.

    ``change`` is ``(index, factor)``: from iteration ``index`` on the task
    deviation ``w - E w`` is scaled by ``sqrt(factor)``.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if form not in ("exact", "printed"):
        raise ValueError(f"unknown form {form!r}")
    M = prior.mean.size
    _check_cap(M, cap)
    n = net.n_agents
    if noise is None or algorithm != "atp_delta":
        noise = NoisePolicy("zero")
    step = GaussianStep(model)
    mu = step.step
    eye = np.eye(M)
    A_mean = eye - step.MRu

    m = prior.mean.copy()
    cur = prior
    Omega = cur.second_moment
    # state of w(i-1); w(-1) = 0
    e_xi = np.zeros(M)
    k_xi = np.zeros((M, M))
    k_pr = np.zeros((M, M))  # second moment along the product-of-means chain
    s_xi = np.zeros((M, M))
    ident = identity_projection_set(net) if algorithm == "nocoop" else None

    msd = np.empty(T)
    xi = np.empty(T)
    sig = np.empty((T, n))
    single = np.empty((T, n))
    mean_err = np.empty((T, M))
    vnorm = np.empty(T)
    ukk_hist = [[] for _ in range(n)]
    psets, gammas, Vs, Psis, Epsis = [], [], [], [], []
    flagged = False

    for i in range(T):
        if change is not None and i == change[0]:
            s = np.sqrt(change[1])
            cur = cur.scaled(change[1])
            Omega = cur.second_moment
            s_xi = np.outer(e_xi, m) + s * (s_xi - np.outer(e_xi, m))
        # adaptation
        noise_term = mu[:, None] * (step.e_rsr(Omega) + step.G) * mu[None, :]
        T_cross = step.e_asr(s_xi) * mu[None, :]
        e_psi = A_mean @ e_xi + step.MRu @ m
        Psi = sym(step.e_asa(k_xi) + T_cross + T_cross.T + noise_term)
        if form == "printed":
            T_pr = step.e_asr(np.outer(e_xi, m)) * mu[None, :]
            Psi_pr = sym(step.e_asa(k_pr) + T_pr + T_pr.T + noise_term)
        S = A_mean @ s_xi + step.MRu @ Omega

        W = cur.cov
        cov_psi = sym((Psi if form == "exact" else Psi_pr) - np.outer(e_psi, e_psi))
        cov_wpsi = S.T - np.outer(m, e_psi)
        W_blocks = [W[net.block(k), net.block(k)] for k in range(n)]
        ukk = [cov_wpsi[net.block(k), net.block(k)] for k in range(n)]
        for k in range(n):
            ukk_hist[k].append(ukk[k])
        vnorm[i] = max(float(np.max(np.abs(W_blocks[k] - ukk[k]))) for k in range(n))

        s2 = noise(i, ukk, W_blocks)
        sig[i] = s2
        if algorithm == "nocoop":
            ps = ident
            gam = np.zeros((M, M))
        else:
            ps = build_projection_set(net, s2)
            gam = gamma_matrix(ps, s2, net.dims)
        if keep_sets:
            psets.append(ps)
            gammas.append(gam)
            Vs.append(W - cov_wpsi)
            Psis.append(Psi if form == "exact" else Psi_pr)
            Epsis.append(e_psi)

        single[i] = single_share_errors(net, cov_wpsi, cov_psi, W, s2)
        if algorithm != "nocoop":
            res = network_inference_error(net, algorithm, W, *observation_moments(algorithm, cov_wpsi, cov_psi, s2, net.dims))
            xi[i] = res.network
            flagged |= res.flagged

        # projection
        P, f = ps.P, ps.f
        Pe = P @ e_psi
        e_xi = Pe - f
        k_xi = sym(P @ Psi @ P.T + gam + np.outer(f, f) - np.outer(Pe, f) - np.outer(f, Pe))
        if form == "printed":
            k_pr = sym(P @ Psi_pr @ P.T + gam + np.outer(f, f) - np.outer(Pe, f) - np.outer(f, Pe))
        s_xi = P @ S - np.outer(f, m)
        msd[i] = float(np.trace(Omega) - 2.0 * np.trace(s_xi) + np.trace(k_xi)) / n
        mean_err[i] = m - e_xi

        if algorithm == "nocoop":
            cov_w = sym((k_xi if form == "exact" else k_pr) - np.outer(e_xi, e_xi))
            cov_ww = s_xi.T - np.outer(m, e_xi)
            res = network_inference_error(net, algorithm, W, cov_ww, cov_w)
            xi[i] = res.network
            flagged |= res.flagged

    return TheoryTrajectory(
        algorithm=algorithm,
        msd=msd,
        xi=xi,
        sigma2=sig,
        single_share_error=single,
        mean_error=mean_err,
        ukk=[np.array(h) for h in ukk_hist],
        V_diag_norm=vnorm,
        ridge_flagged=flagged,
        psets=psets,
        gammas=gammas,
        V=Vs,
        Psi=Psis,
        Epsi=Epsis,
    )


def privacy_recursions(net, prior, model, T, deltas, source="closed_form", **kw):
    """ATP(delta) privacy trajectory with the given noise-power source."""
    return theory_trajectory(net, prior, model, T, "atp_delta", NoisePolicy(source, deltas), **kw)


def limit_projection(net, prior, deltas, algorithm="atp_delta"):
    """Projection set and noise covariance at the limiting noise powers."""
    if algorithm == "nocoop":
        ps = identity_projection_set(net)
        return ps, np.zeros_like(ps.P), np.zeros(net.n_agents)
    if algorithm == "atp0":
        s2 = np.zeros(net.n_agents)
    else:
        s2 = np.array([steady_state_power(prior.W(k), deltas[k]) for k in range(net.n_agents)])
    ps = build_projection_set(net, s2)
    return ps, gamma_matrix(ps, s2, net.dims), s2


def cauchy_converged(series, window=20, tol=1e-10):
    """First index after which consecutive values stay within ``tol`` (relative) for ``window`` steps."""
    x = np.asarray(series, dtype=float)
    if x.ndim > 1:
        x = x.reshape(len(x), -1)
        d = np.max(np.abs(np.diff(x, axis=0)), axis=1) / (1.0 + np.max(np.abs(x[1:]), axis=1))
    else:
        d = np.abs(np.diff(x)) / (1.0 + np.abs(x[1:]))
    run = 0
    for i, di in enumerate(d):
        run = run + 1 if di <= tol else 0
        if run >= window:
            return i + 1 - window + 1
    return None
