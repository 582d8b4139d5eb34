"""Command-line interface.

Subcommands: ``run``, ``compare``, ``inspect-partition``, ``verify-bounds``.
Exit codes: 0 ok, 2 config error, 3 solver non-convergence, 4 numeric
divergence, 5 IO failure (including run-directory collisions).
"""

import argparse
import sys

from .errors import ConfigError, NumericDivergenceError, SolverConvergenceError
from . import runner

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_DIVERGED = 4
EXIT_IO = 5


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedagg",
        description="Deterministic federated-learning simulator with "
                    "mean-field adaptive learning rates.",
        epilog="Exit codes: 0 ok, 2 config error, 3 solver non-convergence, "
               "4 numeric divergence, 5 IO failure or run collision. "
               "Set FEDAGG_DATA_ROOT to point at the MNIST IDX files.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment")
    p_run.add_argument("--config", required=True, help="path to an INI config")
    p_run.add_argument("--out", required=True, help="output directory for the run")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--workers", type=int, default=None,
                       help="worker threads for per-client computation")

    p_cmp = sub.add_parser("compare", help="align and summarize completed runs")
    p_cmp.add_argument("runs", nargs="+", help="run directories to compare")
    p_cmp.add_argument("--out", required=True, help="directory for series/summary files")

    p_ins = sub.add_parser("inspect-partition", help="report a config's client partition")
    p_ins.add_argument("--config", required=True)
    p_ins.add_argument("--heatmap", default=None,
                       help="write client x class counts to this CSV path")

    p_ver = sub.add_parser("verify-bounds", help="re-check a run's recorded diagnostics")
    p_ver.add_argument("--run", required=True, help="run directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            run_dir = runner.run(args.config, args.out, args.seed, args.workers)
            print(f"completed: {run_dir}")
            return EXIT_OK
        if args.command == "compare":
            summary = runner.compare(args.runs, args.out)
            width = max(len(s["run_id"]) for s in summary)
            for s in summary:
                print(f"{s['run_id']:<{width}}  {s['algorithm']:<10} "
                      f"final acc {s['final_accuracy']:.4f}  "
                      f"delta {s['delta_vs_first']:+.4f}")
            return EXIT_OK
        if args.command == "inspect-partition":
            text, _, _ = runner.inspect_partition(args.config, args.heatmap)
            print(text)
            return EXIT_OK
        if args.command == "verify-bounds":
            ok, problems = runner.verify_bounds(args.run)
            for line in problems:
                print(f"FAIL {line}")
            print("bounds verified" if ok else f"{len(problems)} problem(s) found")
            return EXIT_OK if ok else EXIT_DIVERGED
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverConvergenceError as err:
        print(f"solver did not converge: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except NumericDivergenceError as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileExistsError as err:
        print(f"refusing to overwrite: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_IO
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
