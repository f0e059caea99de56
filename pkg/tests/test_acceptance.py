"""End-to-end acceptance criteria, one test per criterion.

Every test records a single ``ACCEPTANCE n: PASS|FAIL ...`` line that is
printed in the terminal summary.
"""

import filecmp
import time

import numpy as np
import pytest

from privlms import harness, theory
from privlms import simulate as sim
from privlms._linalg import to_db
from privlms.privacy import sufficient_power, verify_constraint
from privlms.projection import build_projection_set, build_projector, project

from conftest import ACCEPTANCE_LINES, random_network
from test_projection import kkt_projection


def _record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


@pytest.fixture(scope="module")
def desk_mc(desk):
    """10,000-run desk experiment with all three algorithms."""
    sc = desk.scenario(0.6)
    plan = sim.MonteCarloPlan(10_000, desk.config.iterations, desk.config.seed, chunk=500)
    t = time.perf_counter()
    rec = sim.run_monte_carlo(plan, sc)
    return sc, plan, rec, time.perf_counter() - t


@pytest.fixture(scope="module")
def desk_theory(desk):
    sc = desk.scenario(0.6)
    T = desk.config.iterations
    return {
        "atp_delta": theory.privacy_recursions(desk.net, desk.prior, desk.model, T, sc.deltas, keep_sets=True),
        "atp0": theory.theory_trajectory(desk.net, desk.prior, desk.model, T, "atp0"),
        "nocoop": theory.theory_trajectory(desk.net, desk.prior, desk.model, T, "nocoop"),
    }


def test_acceptance_01_projector_identities():
    rng = np.random.default_rng(101)
    t = time.perf_counter()
    worst_idem = worst_null = worst_off = worst_cons = 0.0
    for _ in range(1000):
        net = random_network(rng)
        s2 = rng.uniform(0, 3, net.n_agents)
        ps = build_projection_set(net, s2)
        for k in range(net.n_agents):
            D, b = net.local_D[k], net.local_b[k]
            if D.shape[0] == 0:
                continue
            P, f = ps.local_P[k], ps.local_f[k]
            worst_idem = max(worst_idem, np.abs(P @ P - P).max())
            worst_null = max(worst_null, np.abs(D @ P).max())
            worst_off = max(worst_off, np.abs(D @ f - b).max())
            y = rng.standard_normal(P.shape[0]) * 3
            x = P @ y - f
            worst_cons = max(worst_cons, np.abs(D @ x + b).max())
    elapsed = time.perf_counter() - t
    ok = max(worst_idem, worst_null, worst_off) <= 1e-9 and worst_cons <= 1e-8 and elapsed < 60
    _record(1, ok, f"P^2-P {worst_idem:.1e}, DP {worst_null:.1e}, Df-b {worst_off:.1e}, "
                   f"constraint {worst_cons:.1e}, {elapsed:.1f}s")
    assert ok


def test_acceptance_02_kkt_oracle():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(500):
        net = random_network(rng)
        s2 = rng.uniform(0, 3, net.n_agents)
        ps = build_projection_set(net, s2)
        for k in range(net.n_agents):
            D = net.local_D[k]
            if D.shape[0] == 0:
                continue
            members = net.neighborhoods[k]
            mdims = [net.dims[l] for l in members]
            weights = ps.weights[k]
            y = rng.standard_normal(sum(mdims)) * 2
            ref = kkt_projection(D, net.local_b[k], weights, mdims, y)
            rows = net.local_block(k, k)
            worst = max(worst, np.abs(project(net, k, ps, y) - ref[rows]).max())
            P, f = build_projector(D, net.local_b[k], weights, mdims)
            worst = max(worst, np.abs(P @ y - f - ref).max())
    ok = worst <= 1e-8
    _record(2, ok, f"max deviation from KKT solve {worst:.1e}")
    assert ok


def _bisection_min_power(U, X, W, delta):
    """Smallest feasible noise power, found without the closed form."""
    if verify_constraint(0.0, U, X, W, delta):
        return 0.0
    hi = 1.0
    while not verify_constraint(hi, U, X, W, delta):
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if verify_constraint(mid, U, X, W, delta):
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-14 * hi:
            break
    return hi


def test_acceptance_03_sufficiency():
    rng = np.random.default_rng(303)
    failures = exceed = 0
    for _ in range(1000):
        m = int(rng.integers(1, 5))
        a = rng.standard_normal((2 * m, 2 * m)) * rng.uniform(0.1, 3)
        J = a @ a.T + 1e-3 * np.eye(2 * m)
        W, U, X = J[:m, :m], J[:m, m:], J[m:, m:]
        delta = rng.uniform(0, 0.999) * np.trace(W)
        s_hat = sufficient_power(U, W, delta)
        failures += not verify_constraint(s_hat, U, X, W, delta)
        exceed += _bisection_min_power(U, X, W, delta) > s_hat
    ok = failures == 0 and exceed == 0
    _record(3, ok, f"constraint violations {failures}/1000, oracle above closed form {exceed}/1000")
    assert ok


def test_acceptance_04_noise_power_limit(desk):
    sc = desk.scenario(0.6)
    traj = theory.privacy_recursions(desk.net, desk.prior, desk.model, 501, sc.deltas, keep_sets=True)
    pn = max(np.linalg.norm(p.P, 2) for p in traj.psets)
    inside = theory.stability_bounds(desk.model.Ru, pn).contains(desk.model.mu)
    target = sc.steady_powers(0)
    rel = np.abs(traj.sigma2 / target - 1)
    within = np.all(rel <= 0.01, axis=1)
    outside = np.flatnonzero(~within)
    settle = 0 if outside.size == 0 else int(outside[-1]) + 1
    ok = inside and bool(within[500])
    _record(4, ok, f"mu inside bounds {inside}; max rel. error at i=500 {rel[500].max():.1e}; "
                   f"within 1% from i={settle}")
    assert ok


def _msd_curve(desk, psets, sigma2):
    gam = [theory.gamma_matrix(p, s, desk.net.dims) for p, s in zip(psets, sigma2)]
    return theory.msd_transient(desk.model, desk.prior, psets, gam)


def test_acceptance_05_noise_monotonicity(desk, desk_theory):
    T = 120
    traj = desk_theory["atp_delta"]
    S = traj.sigma2[:T]
    ps = traj.psets[:T]
    base = _msd_curve(desk, ps, S)
    rng = np.random.default_rng(505)
    worst = np.inf
    worst_coupled = np.inf
    for _ in range(50):
        i, k = int(rng.integers(0, T)), int(rng.integers(0, desk.net.n_agents))
        S2 = S.copy()
        S2[i, k] *= 1.1
        # projection weights held at their unperturbed values
        pert = _msd_curve(desk, ps, S2)
        worst = min(worst, np.min(pert[i:] - base[i:]))
        coupled = _msd_curve(desk, [build_projection_set(desk.net, s) for s in S2], S2)
        worst_coupled = min(worst_coupled, np.min((coupled[i:] - base[i:]) / base[i:]))
    ok = worst >= 0.0
    _record(5, ok, f"min MSD change over 50 perturbations {worst:.2e} (fixed weights); "
                   f"info: with weights re-derived from the perturbed powers min rel. change {worst_coupled:.1e}")
    assert ok


BURN_IN = 30


def test_acceptance_06_msd_theory_vs_simulation(desk, desk_mc, desk_theory):
    sc, plan, rec, elapsed = desk_mc
    T = plan.iterations
    n = max(1, T // 10)
    lines = []
    ok = True
    for alg in plan.algorithms:
        ps, gam, _ = theory.limit_projection(desk.net, desk.prior, sc.deltas, alg)
        ss = theory.steady_state_msd(desk.model, ps, gam).msd
        emp_ss = np.mean(rec.msd[alg][-n:])
        d_ss = abs(float(to_db(emp_ss) - to_db(ss)))
        d_tr = np.max(np.abs(to_db(rec.msd[alg][BURN_IN:]) - to_db(desk_theory[alg].msd[BURN_IN:])))
        ok &= d_ss <= 0.5 and d_tr <= 0.5
        lines.append(f"{alg} steady {d_ss:.3f} dB, transient max {d_tr:.3f} dB")
    ok &= elapsed <= 300
    _record(6, ok, "; ".join(lines) + f"; {plan.runs} runs in {elapsed:.0f}s")
    assert ok


def test_acceptance_07_privacy_theory_vs_simulation(desk, desk_mc, desk_theory):
    sc, plan, rec, _ = desk_mc
    T = plan.iterations
    n = max(1, T // 10)
    lines = []
    ok = True
    for alg in plan.algorithms:
        emp = sim.empirical_privacy(rec, desk.net, alg).xi
        th = desk_theory[alg].xi
        rel_ss = abs(np.mean(emp[-n:]) / np.mean(th[-n:]) - 1)
        rel_tr = np.max(np.abs(emp[BURN_IN:] / th[BURN_IN:] - 1))
        ok &= rel_ss <= 0.05 and rel_tr <= 0.05
        lines.append(f"{alg} steady {100 * rel_ss:.2f}%, max past burn-in {100 * rel_tr:.2f}%")
    _record(7, ok, "; ".join(lines))
    assert ok


def test_acceptance_08_privacy_enforcement(desk, desk_mc, desk_theory):
    sc, plan, rec, _ = desk_mc
    analytic = desk_theory["atp_delta"].single_share_error
    margin_a = np.min(analytic - sc.deltas)
    ep = sim.empirical_privacy(rec, desk.net, "atp_delta")
    z = (ep.single_share - sc.deltas) / ep.single_share_se
    worst_z = np.nanmin(z)
    ok = margin_a >= -1e-6 and worst_z >= -2.0
    _record(8, ok, f"analytic min margin {margin_a:.3e}; empirical min margin {worst_z:.2f} SE")
    assert ok


def test_acceptance_09_mean_behavior(desk, desk_theory):
    traj = theory.privacy_recursions(desk.net, desk.prior, desk.model, 2001, desk.scenario(0.6).deltas)
    err = np.linalg.norm(traj.mean_error[2000])
    sc = desk.scenario(0.6)
    ps, _, _ = theory.limit_projection(desk.net, desk.prior, sc.deltas)
    bounds = theory.stability_bounds(desk.model.Ru, np.linalg.norm(ps.P, 2))
    r_in = theory.mean_spectral_radius(desk.model, ps)
    r_out = theory.mean_spectral_radius(desk.model.with_step(1.5 * bounds.upper), ps)
    ok = bounds.contains(desk.model.mu) and err <= 1e-6 and r_out > 1 and r_in < 1
    _record(9, ok, f"||E w~(2000)|| {err:.1e}; rho(A) {r_in:.3f} inside, {r_out:.3f} at 1.5x upper bound")
    assert ok


def _theory_gain_to_loss(kind, seed, rho=0.1):
    built = harness.build_scenario(harness.preset(kind, seed=seed, rho=[rho]))
    T = built.config.iterations
    sc = built.scenario(rho)
    a = theory.privacy_recursions(built.net, built.prior, built.model, T, sc.deltas)
    b = theory.theory_trajectory(built.net, built.prior, built.model, T, "atp0")
    nan = np.full(T, np.nan)
    ca = harness.Curves(nan, a.msd, nan, a.xi, a.sigma2.mean(axis=1))
    cb = harness.Curves(nan, b.msd, nan, b.xi, nan)
    return harness.gain_to_loss(ca, cb, "theory").ratio


def test_acceptance_10_gain_to_loss_ordering():
    line = np.array([_theory_gain_to_loss("line", s) for s in range(10)])
    dense = np.array([_theory_gain_to_loss("dense", s) for s in range(10)])
    wins = int(np.sum(dense > line))
    ok = wins >= 8 and np.median(dense) > np.median(line)
    _record(10, ok, f"dense > line in {wins}/10 seeds; median ratio dense {np.median(dense):.3f}, "
                    f"line {np.median(line):.3f}")
    assert ok


def test_acceptance_11_adaptive_tracking():
    built = harness.build_scenario(harness.preset("tracking"))
    cfg = built.config
    sc = built.scenario(cfg.rho[0])
    plan = sim.MonteCarloPlan(cfg.runs, cfg.iterations, cfg.seed, algorithms=("atp_delta",),
                              noise_source="adaptive", alpha=cfg.alpha, collect_privacy=False)
    rec = sim.run_monte_carlo(plan, sc)
    n = max(1, cfg.iterations // 10)
    plateau = rec.sigma2["atp_delta"][-n:].mean(axis=0)
    target = sc.steady_powers(cfg.iterations - 1)
    rel = plateau / target - 1
    ok = bool(np.all(np.abs(rel) <= 0.10))
    _record(11, ok, f"post-change plateau / new steady power - 1 per agent: "
                    f"min {rel.min():+.2f}, max {rel.max():+.2f} (tolerance 0.10)")
    assert ok


def test_acceptance_12_fourth_moment_oracle():
    rng = np.random.default_rng(1212)
    worst = 0.0
    n = 1_000_000
    for _ in range(20):
        m = int(rng.integers(1, 4))
        a = rng.standard_normal((m, m))
        R = a @ a.T + 0.2 * np.eye(m)
        L = np.linalg.cholesky(R)
        acc = np.zeros((m * m, m * m))
        for s in range(0, n, 200_000):
            u = rng.standard_normal((200_000, m)) @ L.T
            outer = np.einsum("na,nb->nab", u, u).reshape(len(u), -1, order="F")
            acc += outer.T @ outer
        emp = acc / n
        ref = theory.gaussian_fourth_moment(R)
        worst = max(worst, np.linalg.norm(emp - ref) / np.linalg.norm(ref))
    ok = worst <= 0.01
    _record(12, ok, f"max relative Frobenius deviation over 20 covariances {worst:.2e}")
    assert ok


def test_acceptance_13_determinism(tmp_path):
    cfg = harness.preset("desk", runs=120, iterations=25, chunk=40)
    dirs = []
    for i, workers in enumerate((1, 1, 3)):
        bundle = harness.run_experiment(cfg.model_copy(update={"workers": workers}))
        out = tmp_path / f"run{i}"
        bundle.config["workers"] = 1
        harness.emit(bundle, str(out))
        dirs.append(out)
    names = sorted(p.name for p in dirs[0].glob("curves_*.csv"))
    same = all(
        filecmp.cmp(dirs[0] / name, d / name, shallow=False) for d in dirs[1:] for name in names
    )
    ok = bool(names) and same
    _record(13, ok, f"{len(names)} CSV files bitwise identical across repeats and worker counts 1 and 3: {same}")
    assert ok
