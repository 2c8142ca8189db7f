"""Command line driver for the studies.

Examples
--------
Convergence table for linear elements (mesh sizes 2^-2..2^-4, tau = iota = h^2):

    pbemoc --study convergence --element p1 --levels 2,3,4 --coupling h2 --out t1.csv

One run with four pipelined workers:

    pbemoc --study single --h 0.125 --tau 0.0625 --iota 0.0625 --workers 4

Flags may also be given in a plain `key = value` config file; explicit flags win.
"""

from __future__ import annotations

import argparse
import os
import sys

from .characteristics import CflViolationError
from .fem import SolveFailure, SolverConfig
from .harness import (
    StudyConfig,
    characteristics_study,
    convergence_study,
    format_convergence_rows,
    format_scaling_rows,
    mms_problem,
    run_single,
    scaling_study,
    write_convergence_csv,
    write_scaling_csv,
)
from .pipeline import PipelineError

__all__ = ["cli_main", "main"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CFL = 3
EXIT_SOLVER = 4
EXIT_CONFIG = 5


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pbemoc",
        description="Population balance solver studies on the built-in benchmark problem.",
    )
    p.add_argument("--study", choices=["single", "convergence", "characteristics", "scaling"])
    p.add_argument("--element", choices=["p1", "p2"], help="element order (default p1)")
    p.add_argument("--h", type=float, help="mesh size for single/scaling runs")
    p.add_argument("--tau", type=float, help="time step for single runs")
    p.add_argument("--iota", type=float, help="internal-coordinate spacing")
    p.add_argument("--levels", help="comma-separated exponents k meaning h = 2^-k")
    p.add_argument("--coupling", choices=["h2", "h3", "equal"], help="rule for (tau, iota) from h")
    p.add_argument("--workers", help="worker count (single/convergence) or comma list (scaling)")
    p.add_argument("--T", type=float, help="final time (default 1)")
    p.add_argument("--out", help="output CSV path")
    p.add_argument("--config", help="key = value file supplying defaults for any flag")
    p.add_argument("--snapshots", help="comma-separated time-step indices to export")
    p.add_argument("--mode", choices=["strong", "weak"], help="scaling study mode (default strong)")
    p.add_argument("--block", type=int, help="per-worker block size for weak scaling (default 8)")
    p.add_argument("--steps", type=int, help="number of time steps for scaling runs (default 32)")
    p.add_argument("--solver", choices=["direct", "iterative"], help="linear solver (default direct)")
    p.add_argument("--solver-tol", type=float, help="iterative solver tolerance (default 1e-10)")
    return p


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected `key = value`, got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    if not args.config:
        return args
    file_values = _read_config_file(args.config)
    unknown = set(file_values) - {a.dest for a in parser._actions}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, value in file_values.items():
        if getattr(args, key, None) is None:  # explicit flags win
            setattr(args, key, value)
    return args


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if str(v).strip())


def _as_level(h_exponent) -> float:
    return 2.0 ** -int(h_exponent)


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)

    try:
        args = _merge_config(args, parser)
        return _dispatch(args)
    except (ValueError, OSError) as exc:
        print(f"pbemoc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CflViolationError as exc:
        print(f"pbemoc: stability bound violated: {exc}", file=sys.stderr)
        return EXIT_CFL
    except (SolveFailure, PipelineError) as exc:
        print(f"pbemoc: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def _solver_from(args) -> SolverConfig | None:
    if args.solver is None and args.solver_tol is None:
        return None
    mode = args.solver or "iterative"
    tol = float(args.solver_tol) if args.solver_tol is not None else 1e-10
    return SolverConfig(mode=mode, tol=tol)


def _dispatch(args) -> int:
    if args.study is None:
        raise ValueError("--study is required (single, convergence, characteristics, scaling)")
    study = args.study
    order = {"p1": 1, "p2": 2, None: 1}[args.element]
    solver = _solver_from(args)

    if study == "single":
        if args.h is None or args.tau is None or args.iota is None:
            raise ValueError("single study requires --h, --tau and --iota")
        workers = _parse_int_list(args.workers)[0] if args.workers else None
        snapshots = _parse_int_list(args.snapshots) if args.snapshots else ()
        snapshot_dir = None
        if snapshots:
            snapshot_dir = args.out or "."
            os.makedirs(snapshot_dir, exist_ok=True)
        l2, h1 = run_single(
            mms_problem(),
            float(args.h),
            float(args.tau),
            float(args.iota),
            order,
            workers,
            T=float(args.T) if args.T is not None else None,
            solver=solver,
            snapshot_steps=snapshots,
            snapshot_dir=snapshot_dir,
        )
        mode = f"{workers} pipelined workers" if workers else "sequential"
        print(f"single run ({mode}): h={args.h:g} tau={args.tau:g} iota={args.iota:g}")
        print(f"  worst-slice L2 error: {l2:.6E}")
        print(f"  worst-slice H1 error: {h1:.6E}")
        return EXIT_OK

    if study in ("convergence", "characteristics"):
        if not args.levels:
            raise ValueError(f"{study} study requires --levels")
        levels = tuple(_as_level(k) for k in str(args.levels).split(","))
        coupling = args.coupling or ("equal" if study == "characteristics" else "h2")
        if study == "characteristics":
            order = 2 if args.element is None else order
        config = StudyConfig(
            kind=study,
            element_order=order,
            levels=levels,
            coupling=coupling,
            workers=_parse_int_list(args.workers) if args.workers else (),
            out=args.out,
            T=float(args.T) if args.T is not None else 1.0,
            solver=solver,
        )
        rows = characteristics_study(config) if study == "characteristics" else convergence_study(config)
        text = format_convergence_rows(rows)
        print(text, end="")
        if args.out:
            write_convergence_csv(rows, args.out)
            print(f"wrote {args.out}")
        return EXIT_OK

    # scaling
    config = StudyConfig(
        kind="scaling",
        element_order=order,
        workers=_parse_int_list(args.workers) if args.workers else (1, 2),
        out=args.out,
        h=float(args.h) if args.h is not None else None,
        iota=float(args.iota) if args.iota is not None else None,
        scaling_mode=args.mode or "strong",
        block=int(args.block) if args.block is not None else 8,
        n_steps=int(args.steps) if args.steps is not None else 32,
        solver=solver,
    )
    rows = scaling_study(config)
    text = format_scaling_rows(rows)
    print(text, end="")
    if args.out:
        write_scaling_csv(rows, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
