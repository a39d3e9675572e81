"""Re-fit the discrepancy slopes from prop23.csv alone and compare with the reported rows.

Reads only the CSV: the per-t ``phi_bar`` rows give (t, Phi_bar(t)), and an
ordinary least-squares fit of log Phi_bar on log t per branch must reproduce
the ``small_t_slope`` and ``large_t_slope`` rows. The verdicts are then
re-judged from the recorded numbers.

Usage: python scripts/refit_prop23.py OUT_DIR [--rtol 1e-9]
"""

import argparse
import os
import sys
from collections import defaultdict

import numpy as np

from frozenmix.report import decide, read_rows


def refit(rows):
    curves = defaultdict(lambda: defaultdict(list))
    reported = {}
    for r in rows:
        if r["check"] == "phi_bar":
            curves[r["field"]][r["inputs"]["branch"]].append((r["inputs"]["t"], r["value"]))
        elif r["check"] in ("small_t_slope", "large_t_slope"):
            reported[r["field"], r["check"]] = r
    out = []
    for (name, check), r in sorted(reported.items()):
        pts = np.array(sorted(curves[name]["small" if check == "small_t_slope" else "large"]))
        if np.all(pts[:, 1] > 0):
            slope = float(np.polyfit(np.log(pts[:, 0]), np.log(pts[:, 1]), 1)[0])
        else:
            slope = float("nan")
        out.append((name, check, slope, r))
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out_dir")
    p.add_argument("--rtol", type=float, default=1e-9)
    args = p.parse_args(argv)
    rows = read_rows(os.path.join(args.out_dir, "prop23.csv"))
    bad = 0
    for name, check, slope, r in refit(rows):
        same = np.isclose(slope, r["value"], rtol=args.rtol, atol=0.0)
        verdict = decide(slope, r["bound"], r["relation"], r["error_bar"])
        ok = bool(same and verdict == r["passed"])
        bad += not ok
        print(f"{name:<18} {check:<14} refit {slope:+.6f} reported {r['value']:+.6f} "
              f"bound {r['relation']} {r['bound']:+.3f} {'ok' if ok else 'MISMATCH'}")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
