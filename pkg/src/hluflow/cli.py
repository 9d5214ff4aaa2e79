"""Command-line driver: bench, verify, assemble and graph-export subcommands.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure,
4 deadlock reported by the runtime.
"""

import argparse
import os
import sys

# Keep BLAS single-threaded: parallelism belongs to the task runtime, and
# per-call determinism keeps runs reproducible.  Must happen before numpy
# loads its backend threads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_DEADLOCK = 4

WORKERS_ENV = "HLUFLOW_WORKERS"


def _case_flags(p):
    p.add_argument("--case", choices=("dense2x2", "bem"), default="dense2x2")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--r", type=int, default=4, help="dense2x2 recursion depth")
    p.add_argument("--d", type=int, default=1, help="bem kernel dimension")
    p.add_argument(
        "--eta",
        type=float,
        default=0.5,
        help="admissibility parameter (typical sweep: 0.25 0.5 1.0 2.0)",
    )
    p.add_argument("--leafsize", type=int, default=512)
    p.add_argument("--order", type=int, default=0, help="interpolation order (0 = default)")
    p.add_argument("--eps", type=float, default=1e-6, help="truncation tolerance")
    p.add_argument("--kmax", type=int, default=None, help="hard rank cap")
    p.add_argument("--seed", type=int, default=0)


def _mode_flags(p):
    p.add_argument("--mode", choices=("seq", "par"), default="seq")
    p.add_argument("--workers", type=int, default=None)
    wd = p.add_mutually_exclusive_group()
    wd.add_argument("--wd-er", dest="wd_er", action="store_true", default=True)
    wd.add_argument("--no-wd-er", dest="wd_er", action="store_false")


def build_parser():
    ap = argparse.ArgumentParser(prog="hluflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="time a factorization and report a table")
    _case_flags(b)
    _mode_flags(b)
    b.add_argument("--repetitions", type=int, default=3)
    b.add_argument("--output", default=None, help="write the table to this path")
    b.add_argument("--format", choices=("csv", "json"), default="csv")
    b.add_argument(
        "--dump-config", action="store_true", help="print the JSON config and exit"
    )

    v = sub.add_parser("verify", help="factorize sequentially and check residuals")
    _case_flags(v)
    v.add_argument("--tolerance", type=float, default=1e-4)

    a = sub.add_parser("assemble", help="assemble a kernel H-matrix and save it")
    _case_flags(a)
    a.add_argument("--output", default=None, help="npz path for the matrix payload")
    a.add_argument("--structure", default=None, help="path for the leaf-list dump")

    g = sub.add_parser("graph-export", help="emit the task graph as DOT")
    _case_flags(g)
    _mode_flags(g)
    g.add_argument("--output", default=None, help="DOT path (default stdout)")
    g.add_argument("--trace", default=None, help="also run and write the trace CSV here")
    return ap


def _config_from_args(args):
    from .bench import BenchConfig

    workers = getattr(args, "workers", None)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return BenchConfig(
        case=args.case,
        n=args.n,
        r=args.r,
        d=args.d,
        eta=args.eta,
        leafsize=args.leafsize,
        order=args.order,
        eps=args.eps,
        kmax=args.kmax,
        mode=getattr(args, "mode", "seq"),
        workers=workers,
        wd_er=getattr(args, "wd_er", True),
        repetitions=getattr(args, "repetitions", 1),
        seed=args.seed,
    ).validate()


def _cmd_bench(args):
    from .bench import emit_csv, emit_json, emit_text, run_bench

    cfg = _config_from_args(args)
    if args.dump_config:
        print(cfg.to_json())
        return EXIT_OK
    result = run_bench(cfg)
    text = emit_json([result]) if args.format == "json" else emit_csv([result])
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
    sys.stdout.write(emit_text([result]))
    if not (result.residual == result.residual):  # NaN guard
        print("residual is NaN", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_verify(args):
    import numpy as np

    from .bench import build_case, residual_probe
    from .hlu import hlu_factorize, make_plan
    from .hmatrix import flatten
    from .lowrank import TruncationControl

    cfg = _config_from_args(args)
    template = build_case(cfg)
    h = template.copy()
    plan = make_plan(h, TruncationControl(cfg.eps, cfg.kmax))
    hlu_factorize(plan)
    residual = residual_probe(template, h, cfg.seed)
    lines = [f"residual {residual:.3e} (tolerance {args.tolerance:.3e})"]
    ok = residual <= args.tolerance and residual == residual
    if cfg.n <= 1024:
        a = flatten(template)
        f = flatten(h)
        l = np.tril(f, -1) + np.eye(cfg.n)
        u = np.triu(f)
        rec = float(np.linalg.norm(l @ u - a) / np.linalg.norm(a))
        lines.append(f"reconstruction {rec:.3e}")
        ok = ok and rec <= args.tolerance
    print("\n".join(lines))
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERICAL


def _cmd_assemble(args):
    from .hmatrix import save_hmatrix, structure_dump
    from .kernels import make_bem_case

    cfg = _config_from_args(args)
    if cfg.case != "bem":
        print("assemble expects --case bem", file=sys.stderr)
        return EXIT_CONFIG
    case = make_bem_case(
        cfg.d, cfg.n, cfg.eta, cfg.leafsize, cfg.order, cfg.eps, cfg.kmax
    )
    dump = structure_dump(case.hmatrix)
    if args.output:
        save_hmatrix(args.output, case.hmatrix)
    if args.structure:
        with open(args.structure, "w") as f:
            f.write(dump)
    else:
        sys.stdout.write(dump)
    return EXIT_OK


def _cmd_graph_export(args):
    from .bench import build_case
    from .hlu import emit_task_graph, hlu_factorize, make_plan
    from .lowrank import TruncationControl

    cfg = _config_from_args(args)
    h = build_case(cfg)
    plan = make_plan(
        h,
        TruncationControl(cfg.eps, cfg.kmax),
        mode="parallel",
        workers=cfg.workers,
        wd_er=cfg.wd_er,
    )
    graph = emit_task_graph(plan)
    dot = graph.to_dot()
    if args.output:
        with open(args.output, "w") as f:
            f.write(dot)
    else:
        sys.stdout.write(dot)
    if args.trace:
        h2 = build_case(cfg)
        plan2 = make_plan(
            h2,
            TruncationControl(cfg.eps, cfg.kmax),
            mode="parallel",
            workers=cfg.workers,
            wd_er=cfg.wd_er,
        )
        trace = hlu_factorize(plan2)
        with open(args.trace, "w") as f:
            f.write(trace.to_csv())
    return EXIT_OK


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    from .lowrank import SingularBlockError
    from .runtime import DeadlockError

    handlers = {
        "bench": _cmd_bench,
        "verify": _cmd_verify,
        "assemble": _cmd_assemble,
        "graph-export": _cmd_graph_export,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SingularBlockError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DeadlockError as e:
        print(f"deadlock: {e}\n{e.report}", file=sys.stderr)
        return EXIT_DEADLOCK


if __name__ == "__main__":
    sys.exit(main())
