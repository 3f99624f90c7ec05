"""Command line front end: generate problems, run solves and benchmarks."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .core import operator_from_csr
from .problems import write_matrix_market
from .sridr import idr_s_solve
from .solvers import bicg_bilanczos, rgcr_solve, sym_lanczos_solve


def _add_problem_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--problem", choices=["poisson", "tridiag", "cdr", "mtx"],
                   default="poisson")
    p.add_argument("--m", type=int, default=100, help="grid count (poisson)")
    p.add_argument("--n", type=int, default=100, help="order (tridiag)")
    p.add_argument("--h", type=float, default=0.05, help="mesh width (cdr)")
    p.add_argument("--path", default="", help="matrix file (mtx)")


def _problem_dict(args) -> dict:
    if args.problem == "poisson":
        return {"kind": "poisson", "m": args.m}
    if args.problem == "tridiag":
        return {"kind": "tridiag", "n": args.n}
    if args.problem == "cdr":
        return {"kind": "cdr", "h": args.h}
    return {"kind": "mtx", "path": args.path}


def cmd_gen(args) -> int:
    cfg = harness.ExperimentConfig(problem=_problem_dict(args))
    problem = harness.build_problem(cfg)
    write_matrix_market(args.out, problem.A, comment=problem.label)
    print(f"wrote {problem.label}: {problem.A.nrows} x {problem.A.ncols}, "
          f"{problem.A.nnz} entries -> {args.out}")
    return 0


def cmd_solve(args) -> int:
    cfg = harness.ExperimentConfig(
        problem=_problem_dict(args),
        rhs={"kind": "ones"} if args.rhs == "ones" else {"kind": "random",
                                                         "seed": args.seed},
        tol=args.tol,
        seed=args.seed,
        out=args.out,
    )
    problem = harness.build_problem(cfg)
    b = problem.rhs_set[:, 0]
    op = operator_from_csr(problem.A)
    if args.method == "rgcr":
        _, _, rep = rgcr_solve(op, None, None, b, tol=args.tol, maxit=args.maxit)
    elif args.method == "idr":
        rep, _, _ = idr_s_solve(op, b, s=args.s, tol=args.tol,
                                maxit=args.maxit, seed=args.seed)
    elif args.method in ("cg", "minres"):
        _, rep = sym_lanczos_solve(op, b, n=args.steps, mode=args.method,
                                   tol=args.tol)
    else:
        _, rep = bicg_bilanczos(op, b, n=args.steps, tol=args.tol)
    rows = harness._rows_from_report(rep.method, 1, rep)
    import csv as _csv

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = _csv.writer(fh)
        w.writerow(harness.CSV_HEADER)
        for row in rows:
            w.writerow([row["method"], row["rhs_index"], row["mv_count"],
                        repr(float(row["true_resnorm"])), row["marker"]])
    print(f"{rep.method}: mv={rep.mv_total} rd={rep.rd_total} "
          f"final={rep.final_resnorm:.3e} converged={rep.converged}")
    return 0 if rep.converged else 2


def cmd_bench(args) -> int:
    if args.config:
        cfg = harness.load_config(args.config)
    elif args.preset:
        factory = harness.PRESETS.get(args.preset)
        if factory is None:
            print(f"unknown preset {args.preset!r}", file=sys.stderr)
            return 1
        cfg = factory()
    else:
        print("bench needs --preset or --config", file=sys.stderr)
        return 1
    if args.tol is not None:
        cfg.tol = args.tol
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.mtx_path:
        cfg.problem["path"] = args.mtx_path
    if getattr(args, "pipeline", None):
        cfg.pipeline["kind"] = args.pipeline
    if getattr(args, "problem", None) and args.problem != cfg.problem.get("kind"):
        cfg.problem = {"kind": args.problem}
    if cfg.problem.get("kind") == "mtx" and not Path(
        cfg.problem.get("path", "")
    ).is_file():
        print(
            f"skipping {cfg.label or 'experiment'}: matrix file "
            f"{cfg.problem.get('path')!r} not available (supply --mtx-path)"
        )
        return 0
    path, summary = harness.run_experiment(cfg)
    all_ok = True
    for row in summary:
        status = "ok" if row["converged"] else "NOT CONVERGED"
        all_ok &= row["converged"]
        print(f"{row['method']:>32s}  rhs {row['rhs_index']:>2d}  "
              f"mv={row['mv_total']:>5d}  rd={row['rd_total']:>5d}  "
              f"final={row['final_resnorm']:.3e}  {status}")
    print(f"history written to {path}")
    return 0 if all_ok else 2


def cmd_summarize(args) -> int:
    table = harness.summarize(args.csv, tol=args.tol if args.tol else 1e-8)
    print("method,rhs_index,mv_to_tol,final_resnorm,rd_total")
    for row in table:
        print(f"{row['method']},{row['rhs_index']},{row['mv_to_tol']},"
              f"{row['final_resnorm']!r},{row['rd_total']}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="srkrylov",
        description="Short-recurrence Krylov subspace recycling harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a test matrix")
    _add_problem_args(p_gen)
    p_gen.add_argument("--out", default="matrix.mtx")
    p_gen.set_defaults(func=cmd_gen)

    p_solve = sub.add_parser("solve", help="solve one right-hand side")
    _add_problem_args(p_solve)
    p_solve.add_argument("--method",
                         choices=["rgcr", "idr", "cg", "minres", "bicg"],
                         default="idr")
    p_solve.add_argument("--s", type=int, default=10)
    p_solve.add_argument("--steps", type=int, default=200)
    p_solve.add_argument("--maxit", type=int, default=1000)
    p_solve.add_argument("--rhs", choices=["ones", "random"], default="ones")
    p_solve.add_argument("--tol", type=float, default=1e-8)
    p_solve.add_argument("--seed", type=int, default=0)
    p_solve.add_argument("--out", default="solve.csv")
    p_solve.set_defaults(func=cmd_solve)

    p_bench = sub.add_parser("bench", help="run an experiment preset or config")
    p_bench.add_argument("--preset", choices=sorted(harness.PRESETS))
    p_bench.add_argument("--config", help="flat key=value config file")
    p_bench.add_argument("--pipeline", help="override pipeline kind")
    p_bench.add_argument("--problem",
                         choices=["poisson", "tridiag", "cdr", "mtx"],
                         help="override problem kind (keeps that kind's defaults)")
    p_bench.add_argument("--tol", type=float)
    p_bench.add_argument("--seed", type=int)
    p_bench.add_argument("--out")
    p_bench.add_argument("--mtx-path", help="matrix file for the ocean preset")
    p_bench.set_defaults(func=cmd_bench)

    p_sum = sub.add_parser("summarize", help="aggregate a history CSV")
    p_sum.add_argument("--csv", required=True)
    p_sum.add_argument("--tol", type=float, default=1e-8)
    p_sum.set_defaults(func=cmd_summarize)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
