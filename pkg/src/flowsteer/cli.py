"""Command-line entry points: run / benchmark / emit-figures / validate.

Exit codes: 0 success, 2 validation or configuration failure, 3 training
divergence.  Heavy imports happen after --threads is applied so the BLAS
thread cap takes effect.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_threads(n: int | None):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flowsteer",
        description="Distribution steering via invertible residual flows")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True, help="experiment TOML file")
        sp.add_argument("--out", default=None,
                        help="output directory (default: $FLOWSTEER_OUT_ROOT/<name>)")
        sp.add_argument("--seed", type=int, default=None, help="override experiment seed")
        sp.add_argument("--threads", type=int, default=None, help="BLAS thread cap")

    sp = sub.add_parser("run", help="train a preset and emit all artifacts")
    common(sp)
    sp.add_argument("--steps", type=int, default=None, help="override training steps")
    sp.add_argument("--no-figures", action="store_true", help="skip SVG emission")

    sp = sub.add_parser("benchmark",
                        help="affine covariance-steering benchmark + SDPA export")
    common(sp)
    sp.add_argument("--steps", type=int, default=3000,
                    help="optimizer iterations per start")

    sp = sub.add_parser("emit-figures", help="re-render figures for a finished run")
    sp.add_argument("--out", required=True, help="run directory holding the CSVs")

    sp = sub.add_parser("validate", help="check a config file and exit")
    sp.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(getattr(args, "threads", None))

    from .autodiff import ContractError, SingularMatrixError
    from .policy import ConfigError

    try:
        if args.command == "validate":
            from .config import load_config
            from .experiments import assemble
            assemble(load_config(args.config))
            print(f"ok: {args.config}")
            return 0

        if args.command == "run":
            from .experiments import run
            artifacts = run(args.config, out_dir=args.out, seed=args.seed,
                            steps=args.steps, make_figures=not args.no_figures)
            print(f"run complete: {artifacts.out_dir}")
            for name, path in sorted(artifacts.paths.items()):
                print(f"  {name}: {path}")
            return 0

        if args.command == "benchmark":
            from .experiments import run_benchmark
            res = run_benchmark(args.config, out_dir=args.out, seed=args.seed,
                                iterations=args.steps)
            print(f"benchmark cost: {res['cost']:.6f} "
                  f"(effort {res['effort']:.6f}, kl {res['kl']:.6g})")
            print(f"  cost file: {res['cost_path']}")
            print(f"  sdpa export: {res['sdpa_path']}")
            return 0

        if args.command == "emit-figures":
            from .figures import emit_figures
            for name, path in sorted(emit_figures(args.out).items()):
                print(f"  {name}: {path}")
            return 0
    except (ConfigError, ContractError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (SingularMatrixError, FloatingPointError) as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # TrainingDiverged lives in training; import lazily
        from .training import TrainingDiverged
        if isinstance(e, TrainingDiverged):
            print(f"training diverged: {e}", file=sys.stderr)
            return 3
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
