"""Command-line driver.

    fmlab run <config.ini>   [--out DIR] [--parallel K] [--seed-offset S]
    fmlab validate <config.ini>
    fmlab report <dir>
    fmlab theory --s S --d D [--kappa K] [--delta DELTA] [--n N]
"""

from __future__ import annotations

import argparse
import json
import os
import sys

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fmlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment sweep")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory (default: config [output] dir)")
    p_run.add_argument("--parallel", type=int, default=1)
    p_run.add_argument("--seed-offset", type=int, default=0)

    p_val = sub.add_parser("validate", help="check a config file")
    p_val.add_argument("config")

    p_rep = sub.add_parser("report", help="rebuild report.json from a results directory")
    p_rep.add_argument("dir")

    p_thy = sub.add_parser("theory", help="print rate exponents and sizing rules")
    p_thy.add_argument("--s", type=float, required=True)
    p_thy.add_argument("--d", type=int, required=True)
    p_thy.add_argument("--kappa", type=float, default=0.5)
    p_thy.add_argument("--delta", type=float, default=0.0)
    p_thy.add_argument("--n", type=int, default=1024)

    args = parser.parse_args(argv)

    if args.command == "validate":
        from .config import parse_config

        cfg = parse_config(args.config)
        problems = cfg.validate()
        if problems:
            for p in problems:
                print(f"invalid: {p}")
            return 1
        print("config ok")
        return 0

    if args.command == "run":
        from .config import parse_config
        from .harness import run

        cfg = parse_config(args.config)
        out_dir = args.out or cfg.out_dir
        summary = run(cfg, out_dir, parallel=args.parallel, seed_offset=args.seed_offset)
        for row in summary["slopes"]:
            print(
                f"{row['schedule']} p={row['p']:g}: slope {row['slope']:+.4f} "
                f"(se {row['stderr']:.4f}) theory -{row['theory_exponent']:.4f} [{row['flag']}]"
            )
        frac = summary["failed_fraction"]
        if frac > 0:
            print(f"failed cells: {frac:.1%}")
        return 1 if frac > 0.2 else 0

    if args.command == "report":
        from .harness import report

        summary = report(args.dir)
        print(json.dumps(summary["slopes"], indent=2, sort_keys=True))
        return 0

    if args.command == "theory":
        from . import theory

        ctx = theory.RateContext(s=args.s, d=args.d, kappa=args.kappa, delta=args.delta, n=args.n)
        out = {
            "upper_rate_exponent": theory.upper_rate_exponent(ctx),
            "kde_exponent": theory.kde_exponent(args.d),
            "basis_budget": theory.n_to_basis_count(args.n, args.s, args.d),
        }
        if args.d >= 2:
            out["minimax_lower_exponent"] = theory.minimax_lower_exponent(args.s, args.d)
        print(json.dumps(out, indent=2, sort_keys=True))
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
