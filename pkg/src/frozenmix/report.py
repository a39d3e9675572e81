"""Check rows, their verdicts, and the summary.json / CSV emitters.

Every row records (value, error_bar, relation, bound) and its verdict is a
pure function of those four numbers, so a CSV can be re-judged without the
code that produced it. Error bars always count against the check: for
``<=`` the row passes when value + error_bar <= bound, for ``>=`` when
value - error_bar >= bound. ``info`` rows carry data (a curve to plot, a
fitted constant) and always pass.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

__all__ = ["COLUMNS", "RELATIONS", "Row", "decide", "Report", "read_rows"]

COLUMNS = ("family", "check", "field", "inputs", "value", "bound", "relation", "error_bar", "passed")
RELATIONS = ("<=", "<", ">=", ">", "info")


def decide(value: float, bound: float, relation: str, error_bar: float = 0.0) -> bool:
    """The verdict of one row from its recorded numbers."""
    if relation == "info":
        return True
    if relation not in RELATIONS:
        raise ValueError(f"unknown relation {relation!r}")
    if any(math.isnan(v) for v in (value, bound, error_bar)):
        return False
    if relation == "<=":
        return value + error_bar <= bound
    if relation == "<":
        return value + error_bar < bound
    if relation == ">=":
        return value - error_bar >= bound
    return value - error_bar > bound


def _num(v) -> float:
    return float(v) if v is not None else float("nan")


@dataclass
class Row:
    family: str
    check: str
    field: str
    inputs: dict
    value: float
    bound: float = float("nan")
    relation: str = "info"
    error_bar: float = 0.0
    passed: bool = field(init=False)

    def __post_init__(self):
        self.value, self.bound, self.error_bar = _num(self.value), _num(self.bound), _num(self.error_bar)
        self.passed = decide(self.value, self.bound, self.relation, self.error_bar)

    def as_csv(self) -> list:
        return [
            self.family,
            self.check,
            self.field,
            json.dumps(self.inputs, sort_keys=True, separators=(",", ":")),
            repr(self.value),
            repr(self.bound),
            self.relation,
            repr(self.error_bar),
            "true" if self.passed else "false",
        ]


@dataclass
class Report:
    """Rows grouped by family, plus skipped families and runtime errors."""

    version: str
    seed: int
    profile: str
    config: dict
    families: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def add(self, family: str, rows) -> None:
        self.families.setdefault(family, []).extend(rows)

    def skip(self, family: str, reason: str) -> None:
        self.skipped[family] = reason

    def fail(self, family: str, message: str) -> None:
        self.errors[family] = message

    def family_passed(self, family: str) -> bool:
        return family not in self.errors and all(r.passed for r in self.families.get(family, []))

    @property
    def passed(self) -> bool:
        return not self.errors and not self.skipped and all(self.family_passed(f) for f in self.families)

    def summary(self) -> dict:
        fams = {}
        for name in sorted(set(self.families) | set(self.skipped) | set(self.errors)):
            rows = self.families.get(name, [])
            checks = {}
            for r in rows:
                c = checks.setdefault(r.check, {"rows": 0, "failed": 0})
                c["rows"] += 1
                c["failed"] += 0 if r.passed else 1
            if name in self.errors:
                status = "error"
            elif name in self.skipped:
                status = "skipped"
            else:
                status = "passed" if self.family_passed(name) else "failed"
            entry = {"status": status, "rows": len(rows), "failed": sum(1 for r in rows if not r.passed), "checks": checks}
            if name in self.skipped:
                entry["reason"] = self.skipped[name]
            if name in self.errors:
                entry["error"] = self.errors[name]
            fams[name] = entry
        return {
            "version": self.version,
            "seed": self.seed,
            "profile": self.profile,
            "verdict": "pass" if self.passed else "fail",
            "families": fams,
            "config": self.config,
        }

    def emit(self, out_dir: str) -> list[str]:
        """Write summary.json and one CSV per family; returns the paths written."""
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name, rows in sorted(self.families.items()):
            path = os.path.join(out_dir, f"{name}.csv")
            with open(path, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(COLUMNS)
                for r in rows:
                    w.writerow(r.as_csv())
            paths.append(path)
        path = os.path.join(out_dir, "summary.json")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(self.summary(), indent=2, sort_keys=True, allow_nan=True) + "\n")
        paths.append(path)
        return paths


def read_rows(path: str) -> list[dict]:
    """Parse a family CSV back into dicts with numeric fields converted."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            rec["inputs"] = json.loads(rec["inputs"])
            for k in ("value", "bound", "error_bar"):
                rec[k] = float(rec[k])
            rec["passed"] = rec["passed"] == "true"
            out.append(rec)
    return out
