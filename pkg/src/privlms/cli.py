"""Command-line entry point.

Errors are reported on stderr as one JSON object ``{"error", "message"}``
with exit codes 2 (configuration), 3 (assumption), 4 (I/O) and
5 (numerical).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
from pydantic import ValidationError

from .harness import AssumptionError, build_scenario, emit, load_config, run_experiment
from .network import NetworkError
from .privacy import InfeasibleThresholdError
from .projection import ProjectionError, build_projection_set, operator_norm
from .theory import DimensionCapError, InstabilityError, stability_bounds

EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_IO, EXIT_NUMERICAL = 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("config", message, EXIT_CONFIG)


def _fail(category, message, code):
    sys.stderr.write(json.dumps({"error": category, "message": str(message)}) + "\n")
    sys.exit(code)


def _overrides(args):
    out = {}
    if getattr(args, "rho", None):
        out["rho"] = [float(x) for x in args.rho.split(",")]
    for name in ("runs", "iters", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            out["iterations" if name == "iters" else name] = v
    if getattr(args, "algos", None):
        out["algorithms"] = args.algos.split(",")
    if getattr(args, "noise_source", None):
        out["noise_source"] = args.noise_source.split(",")
    if getattr(args, "workers", None):
        out["workers"] = args.workers
    if getattr(args, "plots", False):
        out["plots"] = True
    return out


def _parser():
    p = _Parser(prog="privlms", description="Privacy-aware adapt-then-project LMS experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, run=True):
        sp.add_argument("--scenario", required=True, help="preset name (line, dense, tracking, desk) or JSON file")
        sp.add_argument("--rho", help="comma-separated privacy ratios")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iters", type=int)
        if run:
            sp.add_argument("--runs", type=int)
            sp.add_argument("--algos", help="comma-separated subset of atp_delta,atp0,nocoop")
            sp.add_argument("--noise-source", help="comma-separated subset of closed_form,steady,adaptive")
            sp.add_argument("--workers", type=int)
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--plots", action="store_true", help="also write SVG charts")
            sp.add_argument("--force", action="store_true", help="run even if network assumptions fail")

    common(sub.add_parser("simulate", help="Monte-Carlo and theory curves"))
    common(sub.add_parser("theory", help="analytic curves only"))
    common(sub.add_parser("validate", help="check network assumptions and step-size bounds"), run=False)
    dump = sub.add_parser("preset-dump", help="print a configuration document")
    dump.add_argument("--scenario", required=True)
    dump.add_argument("--rho")
    dump.add_argument("--seed", type=int)
    dump.add_argument("--iters", type=int)
    dump.add_argument("--runs", type=int)
    return p


def _validate(config):
    built = build_scenario(config)
    if not built.report.structural_ok:
        print(json.dumps({"validation": built.report.as_dict()}, indent=2, sort_keys=True, default=float))
        return False
    s0 = np.zeros(built.net.n_agents)
    pnorm = operator_norm(build_projection_set(built.net, s0))
    bounds = stability_bounds(built.model.Ru, pnorm)
    doc = {
        "validation": built.report.as_dict(),
        "stability": {**bounds.as_dict(), "mu": config.mu, "mu_inside": bounds.contains(config.mu)},
    }
    print(json.dumps(doc, indent=2, sort_keys=True, default=float))
    return built.report.structural_ok


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        config = load_config(args.scenario, **_overrides(args))
        if args.command == "preset-dump":
            print(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True))
            return 0
        if args.command == "validate":
            if not _validate(config):
                _fail("assumption", "network assumptions violated", EXIT_ASSUMPTION)
            return 0
        bundle = run_experiment(config, force=args.force, simulate=args.command == "simulate")
        paths = emit(bundle, args.out)
        print(json.dumps({"written": paths}, indent=2))
        return 0
    except (InstabilityError, ProjectionError, np.linalg.LinAlgError, ArithmeticError) as exc:
        _fail("numerical", exc, EXIT_NUMERICAL)
    except AssumptionError as exc:
        _fail("assumption", exc, EXIT_ASSUMPTION)
    except (ValidationError, ValueError, NetworkError, InfeasibleThresholdError, DimensionCapError) as exc:
        _fail("config", exc, EXIT_CONFIG)
    except OSError as exc:
        _fail("io", exc, EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
