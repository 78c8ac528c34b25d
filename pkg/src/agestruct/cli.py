"""Command line entry point."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .analysis import find_equilibria, net_reproduction_rate, solve_malthusian, write_equilibria_csv
from .bounds import allee_threshold, compute_bound
from .exceptions import InconclusiveError, ModelLoadError, NumericalError, ValidationFailed
from .experiments import load_scenario, record_json, run_scenario, sweep
from .model import load_model, validate
from .stability import KERNELS, build_characteristic, locate_roots

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_INCONCLUSIVE = 0, 2, 3, 4


FLAGS = (("--out", Path, "output directory"),
         ("--h", float, "step size (overrides the scenario)"),
         ("--T", float, "horizon (overrides the scenario)"),
         ("--tol", float, "numerical tolerance"))


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    for flag, typ, help_ in FLAGS:
        common.add_argument(flag, type=typ, default=None, help=help_)

    p = argparse.ArgumentParser(prog="agestruct",
                                description="Density-dependent age-structured population tools")
    # flags given before the subcommand land in separate dests and are merged later
    for flag, typ, help_ in FLAGS:
        p.add_argument(flag, type=typ, default=None, dest="top_" + flag[2:], help=help_)
    sub = p.add_subparsers(dest="cmd", required=True)

    def model_cmd(name, help_):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("model", type=Path)
        return s

    model_cmd("validate", "check model hypotheses on a probe grid")
    model_cmd("r0", "net reproduction rate")
    model_cmd("malthusian", "real growth rate of the linearised problem")
    s = model_cmd("equilibria", "trivial and nontrivial equilibria")
    s.add_argument("--pmax", type=float, default=None)
    s = model_cmd("stability", "characteristic roots at equilibria")
    s.add_argument("--pmax", type=float, default=None)
    s.add_argument("--equilibrium", type=int, default=None, help="index into the equilibria list")
    s.add_argument("--kernel", choices=KERNELS, default="derived")
    s.add_argument("--require-certain", action="store_true")
    model_cmd("bound", "a priori bound on the newborn rate")
    s = model_cmd("allee", "low-density extinction threshold")
    s.add_argument("--search-cap", type=float, default=10.0)
    for name, help_ in (("simulate", "run a scenario file"), ("sweep", "run a scenario sweep")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("scenario", type=Path)
    return p


def _scenario(args):
    sc = load_scenario(args.scenario)
    changes = {}
    if args.h is not None:
        changes["h"] = args.h
    if args.T is not None:
        changes["T"] = args.T
    if args.tol is not None:
        changes["tol"] = args.tol
    if args.out is not None:
        changes["output"] = args.out
    return dataclasses.replace(sc, **changes) if changes else sc


def _run(args) -> int:
    out = args.out
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tol = args.tol

    if args.cmd in ("simulate", "sweep"):
        sc = _scenario(args)
        if args.cmd == "simulate":
            rec = run_scenario(sc)
            print(record_json(rec))
        else:
            recs = sweep(sc)
            for r in recs:
                err = f" error={r.error}" if r.error else ""
                print(f"value={r.value!r} R0={r.R0!r} classification={r.classification}{err}")
        return EXIT_OK

    spec = load_model(args.model)
    if args.cmd == "validate":
        report = validate(spec)
        print(report)
        return EXIT_OK if report.ok else EXIT_INVALID
    if args.cmd == "r0":
        print(repr(net_reproduction_rate(spec)))
    elif args.cmd == "malthusian":
        print(repr(solve_malthusian(spec, tol=tol or 1e-12)))
    elif args.cmd == "equilibria":
        eqs = find_equilibria(spec, args.pmax, tol=tol or 1e-12)
        print("P_star,Q_star,rho_star,residual")
        for e in eqs:
            print(f"{e.P!r},{e.Q!r},{e.rho!r},{e.residual!r}")
        if out is not None:
            write_equilibria_csv(eqs, out / "equilibria.csv")
    elif args.cmd == "stability":
        eqs = find_equilibria(spec, args.pmax)
        chosen = range(len(eqs)) if args.equilibrium is None else [args.equilibrium]
        inconclusive = False
        for i in chosen:
            rep = locate_roots(build_characteristic(spec, eqs[i], kernel=args.kernel),
                               tol=tol or 1e-10)
            print(f"equilibrium={i} " + rep.classification_record())
            if out is not None:
                rep.to_csv(out / f"stability_{i}.csv")
            inconclusive |= rep.classification == "inconclusive"
        if inconclusive and args.require_certain:
            return EXIT_INCONCLUSIVE
    elif args.cmd == "bound":
        cert = compute_bound(spec)
        print(cert.record())
        if out is not None:
            (out / "bound.txt").write_text(cert.record() + "\n")
    elif args.cmd == "allee":
        thr = allee_threshold(spec, args.search_cap)
        print(thr.record())
        if out is not None:
            (out / "allee.txt").write_text(thr.record() + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    for flag, _, _ in FLAGS:
        name = flag[2:]
        if getattr(args, name) is None:
            setattr(args, name, getattr(args, "top_" + name))
    try:
        return _run(args)
    except (ValidationFailed, ModelLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InconclusiveError as exc:
        print(f"inconclusive: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE if getattr(args, "require_certain", False) else EXIT_NUMERIC
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
