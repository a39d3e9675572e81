import json
import os
import runpy
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from frozenmix.cli import OUT_ENV, main
from frozenmix.report import read_rows

MISDECLARED = {
    "kind": "expression",
    "dim": 1,
    "entries": [["1 + 0.5*sin(x1)"]],
    "lambda_min": 0.9,
    "lambda_max": 1.5,
    "holder_c1": 1.0,
    "holder_alpha": 1.0,
    "name": "misdeclared",
}


def _config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def _summary(out):
    return json.loads((out / "summary.json").read_text())


def test_validate_passes_on_small_grid(tmp_path):
    cfg = _config(tmp_path, {"fields": ["identity-1d", "smooth-2d"], "validate": {"grid_n": 11, "n_pairs": 500}})
    assert main(["validate-field", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    assert _summary(tmp_path / "o")["families"]["validate-field"]["status"] == "passed"


def test_all_is_fail_fast(tmp_path):
    cfg = _config(tmp_path, {"fields": [MISDECLARED], "validate": {"grid_n": 21, "n_pairs": 500}})
    out = tmp_path / "o"
    assert main(["all", "--config", cfg, "--out", str(out), "--quiet"]) == 1
    fams = _summary(out)["families"]
    assert fams["validate-field"]["status"] == "failed"
    skipped = [k for k, v in fams.items() if v["status"] == "skipped"]
    assert len(skipped) == 7
    assert all(fams[k]["reason"] == "upstream failure in validate-field" for k in skipped)
    assert not (out / "prop21.csv").exists()


def test_contraction_on_constant_field(tmp_path):
    cfg = _config(tmp_path, {"fields": ["identity-1d"], "contraction": {"x_n_1d": 5, "eps_list": [1e-2]}})
    out = tmp_path / "o"
    assert main(["contraction", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    rows = read_rows(str(out / "contraction.csv"))
    assert all(r["value"] == 0.0 for r in rows if r["check"] == "contraction")


def test_prop23_rows_match_grid(tmp_path):
    cfg = _config(tmp_path, {"fields": ["holder-1d-a0.5"], "prop23": {"x_n": 5}})
    out = tmp_path / "o"
    assert main(["prop23", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    rows = read_rows(str(out / "prop23.csv"))
    n_t = 7 + 5
    # the majorant gates take the worst x at each t
    assert sum(r["check"] == "phi_le_genbnd" for r in rows) == n_t
    assert sum(r["check"] == "phi_bar" for r in rows) == n_t
    slope = [r for r in rows if r["check"] == "small_t_slope"]
    assert len(slope) == 1 and slope[0]["bound"] == pytest.approx(0.25 - 1 - 0.05)
    refit = runpy.run_path(str(Path(__file__).parents[1] / "scripts" / "refit_prop23.py"))
    assert refit["main"]([str(out)]) == 0


def test_summary_is_deterministic(tmp_path):
    cfg = _config(tmp_path, {"fields": ["holder-2d-a0.5"], "kernel": {"times": [0.5]}})
    for name in ("a", "b"):
        assert main(["kernel-checks", "--config", cfg, "--out", str(tmp_path / name), "--quiet", "--seed", "5"]) == 0
    for name in ("summary.json", "kernel-checks.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert _summary(tmp_path / "a")["seed"] == 5


@pytest.mark.parametrize(
    "argv",
    [
        ["nonsense"],
        ["validate-field", "--profile", "huge"],
        ["validate-field", "--seed", "x"],
    ],
)
def test_usage_errors_exit_2(argv):
    assert main(argv + ["--quiet"]) == 2


def test_config_errors_exit_2(tmp_path):
    out = str(tmp_path / "o")
    assert main(["validate-field", "--config", str(tmp_path / "missing.json"), "--out", out, "--quiet"]) == 2
    assert main(["validate-field", "--config", _config(tmp_path, {"fieldz": []}), "--out", out, "--quiet"]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["validate-field", "--config", str(tmp_path / "broken.json"), "--out", out, "--quiet"]) == 2


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_output_exit_2(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    assert main(["kernel-checks", "--out", str(locked / "o"), "--quiet"]) == 2


def test_output_under_a_file_exit_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["kernel-checks", "--out", str(blocker / "o"), "--quiet"]) == 2


def test_env_var_and_module_entry_point(tmp_path):
    cfg = _config(tmp_path, {"fields": ["identity-1d"], "validate": {"grid_n": 5, "n_pairs": 100}})
    env = {**os.environ, OUT_ENV: str(tmp_path / "env-out")}
    proc = subprocess.run(
        [sys.executable, "-m", "frozenmix", "validate-field", "--config", cfg, "--quiet"],
        env=env, capture_output=True, text=True, cwd=tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "env-out" / "validate-field.csv").exists()
    assert (tmp_path / "env-out" / "timings.json").exists()
