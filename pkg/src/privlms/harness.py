"""Scenario presets, experiment orchestration, metrics and file output."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ._linalg import to_db
from .datamodel import AgentSignalModel, calibrate_snr, make_task_prior, random_regressor_cov
from .network import ConstraintSpec, build_network, validate_assumptions
from .privacy import steady_state_power, thresholds
from .projection import build_projection_set, operator_norm
from .simulate import MonteCarloPlan, Scenario, empirical_privacy, run_monte_carlo
from . import theory as _theory

CSV_HEADER = ("iter", "msd_emp_db", "msd_th_db", "xi_emp_db", "xi_th_db", "sigma_mean")
STEADY_FRACTION = 0.1


class AssumptionError(RuntimeError):
    """The constraint structure fails a required check."""

    def __init__(self, report):
        names = sorted({c.name for c in report.failures()})
        super().__init__(f"network assumptions violated: {', '.join(names)}")
        self.report = report


# ------------------------------------------------------------------- config

class ConstraintConfig(BaseModel):
    """One constraint of a custom network.

    Either scalar ``coeffs`` (one per participant, times the identity) or
    explicit coefficient ``blocks``; ``offset`` is a scalar (scalar form) or a
    vector with one entry per row.
    """

    model_config = ConfigDict(extra="forbid")
    participants: list[int]
    coeffs: list[float] | None = None
    blocks: list[list[list[float]]] | None = None
    offset: float | list[float] = 0.0

    @model_validator(mode="after")
    def _one_form(self):
        if (self.coeffs is None) == (self.blocks is None):
            raise ValueError("give exactly one of 'coeffs' or 'blocks'")
        return self


class ScenarioConfig(BaseModel):
    """Complete, JSON-compatible description of an experiment."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["line", "dense", "tracking", "desk", "custom"] = "line"
    n_agents: int = Field(12, ge=1)
    dim: int = Field(3, ge=1)
    constraint_form: Literal["scalar", "block"] = "scalar"
    constraints: list[ConstraintConfig] | None = None
    coef_range: tuple[float, float] = (1.0, 3.0)
    snr_db_range: tuple[float, float] = (10.0, 20.0)
    regressor_eig_range: tuple[float, float] = (2.5, 4.0)
    task_scale: float = Field(1.0, gt=0)
    mu: float = Field(0.02, gt=0)
    rho: list[float] = [0.1]
    alpha: float = Field(0.95, gt=0, lt=1)
    algorithms: list[Literal["atp_delta", "atp0", "nocoop"]] = ["atp_delta", "atp0", "nocoop"]
    noise_source: list[Literal["closed_form", "steady", "adaptive"]] = ["closed_form"]
    runs: int = Field(1000, ge=0)
    iterations: int = Field(400, ge=1)
    seed: int = Field(0, ge=0)
    scenario_seed: int | None = Field(None, ge=0)
    change_index: int | None = None
    change_factor: float = Field(2.0, gt=0)
    theory: bool = True
    theory_cap: int = Field(_theory.DEFAULT_CAP, ge=1)
    chunk: int = Field(256, ge=1)
    workers: int = Field(1, ge=1)
    plots: bool = False

    @field_validator("rho", mode="before")
    @classmethod
    def _rho_list(cls, v):
        return [v] if isinstance(v, (int, float)) else v

    @field_validator("noise_source", mode="before")
    @classmethod
    def _source_list(cls, v):
        return [v] if isinstance(v, str) else v

    @field_validator("rho")
    @classmethod
    def _rho_range(cls, v):
        if not v or any(not 0.0 <= r < 1.0 for r in v):
            raise ValueError("every rho must lie in [0, 1)")
        return v

    @field_validator("coef_range", "snr_db_range", "regressor_eig_range")
    @classmethod
    def _ordered(cls, v):
        if v[0] > v[1]:
            raise ValueError("range must be (low, high) with low <= high")
        return v

    @model_validator(mode="after")
    def _check(self):
        if self.change_index is not None and not 0 <= self.change_index < self.iterations:
            raise ValueError("change_index must lie in [0, iterations)")
        if self.kind == "custom" and not self.constraints:
            raise ValueError("custom networks need explicit constraints")
        if self.regressor_eig_range[0] <= 0 or self.coef_range[0] <= 0:
            raise ValueError("eigenvalue and coefficient ranges must be positive")
        return self

    @property
    def effective_scenario_seed(self):
        return self.seed if self.scenario_seed is None else self.scenario_seed


_LINE = dict(kind="line", n_agents=12, dim=3, rho=[0.1, 0.6, 0.85], iterations=400, runs=1000)
_DENSE = dict(kind="dense", n_agents=12, dim=3, rho=[0.1], iterations=400, runs=1000)
_TRACKING = dict(
    kind="tracking", n_agents=6, dim=2, rho=[0.6], iterations=150, runs=1000,
    change_index=75, change_factor=2.0, noise_source=["steady", "adaptive"],
)
_DESK = dict(
    kind="desk", n_agents=6, dim=2, constraint_form="block", rho=[0.6], iterations=300, runs=10000,
)
PRESETS = {"line": _LINE, "dense": _DENSE, "tracking": _TRACKING, "desk": _DESK, "custom": dict(kind="custom")}


def topology(kind, n_agents):
    """Constraint participants of a named preset."""
    if kind == "line":
        return [(q, q + 1) for q in range(n_agents - 1)]
    fixed = {
        "dense": (12, [tuple(range(0, 6)), tuple(range(3, 9)), tuple(range(6, 12)), (0, 1, 2, 9, 10, 11)]),
        "tracking": (6, [(0, 1), (1, 2, 3), (2, 4), (3, 5), (4, 5)]),
        "desk": (6, [(0, 1), (1, 2, 3), (2, 4), (3, 5), (4, 5)]),
    }
    n, parts = fixed[kind]
    if n_agents != n:
        raise ValueError(f"the {kind} topology has {n} agents, not {n_agents}")
    return parts


def preset(kind, **overrides):
    """Preset configuration with field overrides applied."""
    if kind not in PRESETS:
        raise ValueError(f"unknown preset {kind!r}; choose from {sorted(PRESETS)}")
    if kind == "custom" and "constraints" not in overrides:
        raise ValueError("custom preset needs 'constraints'")
    data = dict(PRESETS[kind])
    data.update(overrides)
    return ScenarioConfig(**data)


def load_config(source, **overrides):
    """Config from a preset name or a JSON file path."""
    if source in PRESETS:
        return preset(source, **overrides)
    try:
        with open(source, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read scenario file {source}: {exc.strerror}") from exc
    data.update(overrides)
    return ScenarioConfig(**data)


# ---------------------------------------------------------------- scenarios

def _signed(rng, lo, hi, size=None):
    return rng.choice([-1.0, 1.0], size=size) * rng.uniform(lo, hi, size=size)


def build_constraints(config, rng):
    lo, hi = config.coef_range
    M = config.dim
    if config.kind == "custom":
        out = []
        for c in config.constraints:
            if c.coeffs is not None:
                blocks = tuple(x * np.eye(M) for x in c.coeffs)
                off = np.broadcast_to(np.asarray(c.offset, dtype=float), (M,))
            else:
                blocks = tuple(np.asarray(b, dtype=float) for b in c.blocks)
                off = np.broadcast_to(np.asarray(c.offset, dtype=float), (len(c.blocks[0]),))
            out.append(ConstraintSpec(c.participants, blocks, off))
        return out
    out = []
    for parts in topology(config.kind, config.n_agents):
        if config.constraint_form == "block":
            blocks = tuple(_signed(rng, lo, hi, (1, M)) for _ in parts)
            out.append(ConstraintSpec(parts, blocks, [_signed(rng, lo, hi)]))
        else:
            out.append(ConstraintSpec.scalar(parts, _signed(rng, lo, hi, len(parts)), _signed(rng, lo, hi), M))
    return out


@dataclass
class BuiltScenario:
    config: ScenarioConfig
    net: object
    prior: object
    model: object
    report: object
    snr_db: np.ndarray

    def scenario(self, rho):
        deltas = thresholds(self.prior, rho)
        change = None
        if self.config.change_index is not None:
            change = (self.config.change_index, self.config.change_factor)
        return Scenario(self.net, self.prior, self.model, deltas, change)


def build_scenario(config):
    """Network, task prior and signal model drawn from the scenario seed."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.effective_scenario_seed)))
    constraints = build_constraints(config, rng)
    n = config.n_agents
    dims = [config.dim] * n
    net = build_network(constraints, dims)
    report = validate_assumptions(net)
    prior = make_task_prior(net)
    r = prior.latent_dim
    # average per-agent task variance equals task_scale
    prior = make_task_prior(net, latent_cov=np.eye(r) * config.task_scale * n / max(r, 1))
    Ru = tuple(random_regressor_cov(m, config.regressor_eig_range, rng) for m in dims)
    snr = rng.uniform(*config.snr_db_range, size=n)
    model = calibrate_snr(AgentSignalModel(Ru, np.ones(n), config.mu), prior, snr)
    return BuiltScenario(config, net, prior, model, report, snr)


# ------------------------------------------------------------------ outputs

@dataclass
class Curves:
    """Linear-scale learning curves of one algorithm family."""

    msd_emp: np.ndarray
    msd_th: np.ndarray
    xi_emp: np.ndarray
    xi_th: np.ndarray
    sigma_mean: np.ndarray

    @property
    def iterations(self):
        return len(self.msd_emp)


@dataclass
class OutputBundle:
    config: dict
    families: dict
    summary: dict = field(default_factory=dict)


def _nan(T):
    return np.full(T, np.nan)


def steady_value(curve, fraction=STEADY_FRACTION):
    """Mean of the linear values over the final ``fraction`` of iterations."""
    curve = np.asarray(curve, dtype=float)
    n = max(1, int(math.ceil(len(curve) * fraction)))
    return float(np.mean(curve[-n:]))


@dataclass
class GainToLoss:
    ratio: float
    gain_db: float
    loss_db: float
    degenerate: bool

    def as_dict(self):
        return {"ratio": _finite(self.ratio), "gain_db": _finite(self.gain_db),
                "loss_db": _finite(self.loss_db), "degenerate": self.degenerate}


def gain_to_loss(delta_curves, atp0_curves, source="theory"):
    """Privacy gain in dB over accuracy loss in dB at steady state."""
    if source not in ("theory", "empirical"):
        raise ValueError(f"unknown source {source!r}")
    suffix = "th" if source == "theory" else "emp"
    xd = steady_value(getattr(delta_curves, f"xi_{suffix}"))
    x0 = steady_value(getattr(atp0_curves, f"xi_{suffix}"))
    md = steady_value(getattr(delta_curves, f"msd_{suffix}"))
    m0 = steady_value(getattr(atp0_curves, f"msd_{suffix}"))
    gain = abs(float(to_db(xd)) - float(to_db(x0)))
    loss = abs(float(to_db(md)) - float(to_db(m0)))
    if loss == 0.0:
        return GainToLoss(math.inf, gain, loss, True)
    return GainToLoss(gain / loss, gain, loss, False)


def _finite(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else (None if math.isnan(x) else ("inf" if x > 0 else "-inf"))


def _family_name(algorithm, rho=None, source=None, n_sources=1):
    if algorithm != "atp_delta":
        return algorithm
    name = f"atp_delta_rho{rho:g}"
    return name if n_sources == 1 else f"{name}_{source}"


# ---------------------------------------------------------------- experiment

def run_experiment(config, force=False, simulate=True):
    """Build the scenario, evaluate theory and Monte-Carlo curves and metrics."""
    built = build_scenario(config)
    if not built.report.structural_ok and not force:
        raise AssumptionError(built.report)
    net, prior, model = built.net, built.prior, built.model
    T = config.iterations
    notices = []
    do_theory = config.theory
    if do_theory and net.total_dim > config.theory_cap:
        notices.append(f"theory skipped: dimension {net.total_dim} exceeds cap {config.theory_cap}")
        do_theory = False
    if simulate and config.runs < 1:
        simulate = False

    families = {}
    steady = {}
    gtl = {}
    pnorms = []
    flags = {}
    others = [a for a in config.algorithms if a != "atp_delta"]
    nsrc = len(config.noise_source)
    base_scenario = built.scenario(config.rho[0])

    def theory_for(scn, algorithm, source):
        if not do_theory or source == "adaptive":
            return None
        pol = _theory.NoisePolicy(source, scn.deltas) if algorithm == "atp_delta" else None
        return _theory.theory_trajectory(net, prior, model, T, algorithm, pol, change=scn.change, keep_sets=True)

    def mc_for(scn, algorithms, source, schedule):
        if not simulate:
            return None
        src = source if source != "closed_form" or schedule is not None else "steady"
        plan = MonteCarloPlan(
            runs=config.runs, iterations=T, seed=config.seed, algorithms=tuple(algorithms),
            noise_source=src, schedule=schedule, alpha=config.alpha, chunk=config.chunk, workers=config.workers,
        )
        return run_monte_carlo(plan, scn)

    def curves(algorithm, traj, rec):
        msd_emp = rec.msd[algorithm] if rec is not None else _nan(T)
        xi_emp = _nan(T)
        if rec is not None:
            try:
                ep = empirical_privacy(rec, net, algorithm)
                xi_emp = ep.xi
                flags[algorithm] = flags.get(algorithm, False) | ep.flagged
            except ValueError as exc:
                notices.append(f"empirical privacy skipped for {algorithm}: {exc}")
        sig = rec.sigma2[algorithm].mean(axis=1) if rec is not None else (
            traj.sigma2.mean(axis=1) if traj is not None else _nan(T))
        return Curves(
            msd_emp=np.asarray(msd_emp, dtype=float),
            msd_th=traj.msd if traj is not None else _nan(T),
            xi_emp=np.asarray(xi_emp, dtype=float),
            xi_th=traj.xi if traj is not None else _nan(T),
            sigma_mean=np.asarray(sig, dtype=float),
        )

    if others:
        trajs = {a: theory_for(base_scenario, a, "closed_form") for a in others}
        rec = mc_for(base_scenario, others, "closed_form", None)
        for a in others:
            families[a] = curves(a, trajs[a], rec)
            if trajs[a] is not None:
                pnorms.append(max(operator_norm(p) for p in trajs[a].psets))

    if "atp_delta" in config.algorithms:
        for rho in config.rho:
            scn = built.scenario(rho)
            for source in config.noise_source:
                traj = theory_for(scn, "atp_delta", source)
                schedule = traj.sigma2 if traj is not None else None
                if source == "closed_form" and schedule is None and simulate:
                    notices.append("closed-form noise powers need theory; using the steady-state powers instead")
                rec = mc_for(scn, ["atp_delta"], source, schedule)
                name = _family_name("atp_delta", rho, source, nsrc)
                families[name] = curves("atp_delta", traj, rec)
                if traj is not None:
                    pnorms.append(max(operator_norm(p) for p in traj.psets))
                if "atp0" in families:
                    gtl[name] = {
                        "theory": gain_to_loss(families[name], families["atp0"], "theory").as_dict()
                        if traj is not None and do_theory else None,
                        "empirical": gain_to_loss(families[name], families["atp0"], "empirical").as_dict()
                        if simulate else None,
                    }

    # steady-state analysis at the limiting projectors
    if do_theory:
        for name, alg, rho in _steady_targets(config):
            scn = built.scenario(rho)
            final_prior = scn.prior_at(T - 1)
            ps, gam, s2 = _theory.limit_projection(net, final_prior, scn.deltas, alg)
            try:
                ss = _theory.steady_state_msd(model, ps, gam, cap=config.theory_cap)
                steady[name] = {"msd": ss.msd, "msd_db": float(to_db(ss.msd)),
                                "msd_approx": ss.msd_approx, "msd_approx_db": float(to_db(ss.msd_approx)),
                                "radius": ss.radius, "radius_approx": ss.radius_approx}
            except _theory.InstabilityError as exc:
                steady[name] = {"error": str(exc), "radius": exc.radius}
            pnorms.append(operator_norm(ps))

    if not pnorms:
        pnorms.append(operator_norm(build_projection_set(net, np.zeros(net.n_agents))))
        for rho in config.rho:
            scn = built.scenario(rho)
            ss = [steady_state_power(scn.prior_at(T - 1).W(k), scn.deltas[k]) for k in range(net.n_agents)]
            pnorms.append(operator_norm(build_projection_set(net, ss)))
    bounds = _theory.stability_bounds(model.Ru, max(pnorms))

    summary = {
        "kind": config.kind,
        "families": {},
        "gain_to_loss": gtl,
        "steady_state_theory": steady,
        "stability": {**bounds.as_dict(), "mu": config.mu, "mu_inside": bounds.contains(config.mu),
                      "hypothesis_warning": bounds.warning},
        "validation": built.report.as_dict(),
        "scenario": {
            "n_agents": net.n_agents,
            "total_dim": net.total_dim,
            "snr_db": built.snr_db.tolist(),
            "sigma_v2": model.sigma_v2.tolist(),
            "thresholds": {f"{r:g}": built.scenario(r).deltas.tolist() for r in config.rho},
        },
        "ridge_flagged": flags,
        "notices": notices,
        "defaults": _defaults_note(config),
    }
    for name, c in families.items():
        summary["families"][name] = {
            "msd_emp_db": _finite(to_db(steady_value(c.msd_emp))),
            "msd_th_db": _finite(to_db(steady_value(c.msd_th))),
            "xi_emp_db": _finite(to_db(steady_value(c.xi_emp))),
            "xi_th_db": _finite(to_db(steady_value(c.xi_th))),
            "sigma_mean": _finite(steady_value(c.sigma_mean)),
        }
    return OutputBundle(config.model_dump(mode="json"), families, summary)


def _steady_targets(config):
    out = []
    for a in config.algorithms:
        if a != "atp_delta":
            out.append((a, a, config.rho[0]))
    if "atp_delta" in config.algorithms:
        for rho in config.rho:
            out.append((f"atp_delta_rho{rho:g}", "atp_delta", rho))
    return out


def _defaults_note(config):
    """Parameters not fixed by the experiment description, labeled as defaults."""
    return {
        "iterations": config.iterations,
        "snr_db_range": list(config.snr_db_range),
        "regressor_eig_range": list(config.regressor_eig_range),
        "task_scale": config.task_scale,
        "change_factor": config.change_factor if config.change_index is not None else None,
    }


# ------------------------------------------------------------------- emission

def _fmt(x):
    return "" if not np.isfinite(x) else "%.17g" % x


def _json_clean(obj):
    if isinstance(obj, dict):
        return {str(k): _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _finite(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def emit(bundle, directory, plots=None):
    """Write per-family CSVs, ``summary.json`` and optional SVG charts."""
    paths = []
    try:
        os.makedirs(directory, exist_ok=True)
        for name, c in bundle.families.items():
            path = os.path.join(directory, f"curves_{name}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_HEADER)
                cols = [to_db(c.msd_emp), to_db(c.msd_th), to_db(c.xi_emp), to_db(c.xi_th), c.sigma_mean]
                for i in range(c.iterations):
                    w.writerow([i] + [_fmt(col[i]) for col in cols])
            paths.append(path)
        path = os.path.join(directory, "summary.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_json_clean({"config": bundle.config, **bundle.summary}), fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(path)
        if plots if plots is not None else bundle.config.get("plots", False):
            paths += _plot(bundle, directory)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write output: {exc.strerror}", exc.filename) from exc
    return paths


def _plot(bundle, directory):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "privlms"
    out = []
    for metric, label, fname in (("msd", "network MSD (dB)", "msd.svg"), ("xi", "network inference error (dB)", "privacy.svg")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, c in bundle.families.items():
            emp = to_db(getattr(c, f"{metric}_emp"))
            th = to_db(getattr(c, f"{metric}_th"))
            if np.any(np.isfinite(emp)):
                ax.plot(emp, label=f"{name} (simulation)")
            if np.any(np.isfinite(th)):
                ax.plot(th, "--", label=f"{name} (theory)")
        ax.set_xlabel("iteration")
        ax.set_ylabel(label)
        ax.legend(fontsize=7)
        path = os.path.join(directory, fname)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        out.append(path)
    return out
