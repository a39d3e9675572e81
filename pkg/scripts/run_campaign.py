"""Run every check family and print a per-family table.

Usage: python scripts/run_campaign.py [--profile desk|thorough] [--out DIR] [--seed N]
"""

import argparse
import json
import os
import sys

from frozenmix.cli import run


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--profile", default="desk", choices=["desk", "thorough"])
    p.add_argument("--out", default="frozenmix-out")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    code = run("all", out=args.out, seed=args.seed, profile_name=args.profile, log=lambda m: print(m, file=sys.stderr))
    with open(os.path.join(args.out, "summary.json"), encoding="utf-8") as fh:
        summary = json.load(fh)
    with open(os.path.join(args.out, "timings.json"), encoding="utf-8") as fh:
        timings = json.load(fh)
    print(f"{'family':<20} {'status':<8} {'rows':>8} {'failed':>7} {'seconds':>8}")
    for name, fam in summary["families"].items():
        print(f"{name:<20} {fam['status']:<8} {fam['rows']:>8} {fam['failed']:>7} {timings.get(name, float('nan')):>8.1f}")
    print(f"verdict: {summary['verdict']} (exit {code})")
    return code


if __name__ == "__main__":
    sys.exit(main())
