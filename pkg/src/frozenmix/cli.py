"""Command-line front end: ``python -m frozenmix <subcommand> [flags]``.

Exit status is 0 when every check passes, 1 when a check fails and 2 on a
configuration or runtime error. ``all`` runs the families in order and
stops at the first failure, marking the remaining families as skipped.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback

from . import __version__
from .campaign import FAMILIES, run_family
from .config import PROFILES, ConfigError, load_config
from .report import Report

__all__ = ["main", "run", "OUT_ENV"]

OUT_ENV = "FROZENMIX_OUT"
SUBCOMMANDS = tuple(FAMILIES) + ("all",)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frozenmix", description="Numerical checks of the frozen-coefficient uniqueness argument.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON experiment config (default: the built-in profile)")
    p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--profile", choices=PROFILES, help="base profile, overrides the config's")
    p.add_argument("--quiet", action="store_true", help="suppress per-family progress lines")
    return p


def _writable(path: str) -> None:
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write-test")
    with open(probe, "w", encoding="utf-8") as fh:
        fh.write("")
    os.remove(probe)


def run(subcommand: str, config_path: str | None = None, out: str | None = None, seed: int | None = None,
        profile_name: str | None = None, log=None) -> int:
    """Run one family (or ``all``), write the report, and return the exit status."""
    log = log or (lambda msg: None)
    if subcommand not in SUBCOMMANDS:
        log(f"unknown subcommand {subcommand!r}")
        return 2
    try:
        cfg = load_config(config_path, profile_name)
        if seed is not None:
            cfg = type(cfg).from_dict({**cfg.to_dict(), "seed": seed})
    except ConfigError as exc:
        log(f"config error: {exc}")
        return 2
    out_dir = out or os.environ.get(OUT_ENV) or cfg.out_dir
    try:
        _writable(out_dir)
    except OSError as exc:
        log(f"output directory {out_dir!r} is not writable: {exc}")
        return 2

    report = Report(__version__, cfg.seed, cfg.profile, cfg.to_dict())
    families = list(FAMILIES) if subcommand == "all" else [subcommand]
    timings = {}
    blocked = None
    for name in families:
        if blocked is not None:
            report.skip(name, f"upstream failure in {blocked}")
            log(f"{name}: skipped")
            continue
        start = time.perf_counter()
        try:
            report.add(name, run_family(name, cfg))
        except Exception as exc:  # a failing family must still leave a report behind
            report.fail(name, f"{type(exc).__name__}: {exc}")
            log(traceback.format_exc())
        timings[name] = time.perf_counter() - start
        ok = report.family_passed(name)
        n = len(report.families.get(name, []))
        log(f"{name}: {'pass' if ok else 'FAIL'} ({n} rows, {timings[name]:.1f} s)")
        if not ok and subcommand == "all":
            blocked = name
    try:
        report.emit(out_dir)
        with open(os.path.join(out_dir, "timings.json"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        log(f"cannot write report: {exc}")
        return 2
    if report.errors:
        return 2
    return 0 if report.passed else 1


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    return run(args.subcommand, args.config, args.out, args.seed, args.profile, log)


if __name__ == "__main__":
    sys.exit(main())
