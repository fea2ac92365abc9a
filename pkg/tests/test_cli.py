import csv
import json
from pathlib import Path

import pytest
import yaml

from mprsens import config as C
from mprsens.cli import run
from mprsens.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _small(tmp_path, base="standard_tree.yaml", **edits):
    cfg = yaml.safe_load((CONFIGS / base).read_text())
    cfg.setdefault("mc", {}).update(n_paths=20000, n_steps=32)
    cfg.setdefault("counterexample", {}).update(n_paths=20000)
    for dotted, val in edits.items():
        sec, key = dotted.split("__")
        cfg.setdefault(sec, {})[key] = val
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _report(out):
    return json.loads((out / "report.json").read_text())


@pytest.mark.parametrize("base", ["standard_tree.yaml", "mixed_trinomial.yaml", "zero_direction.yaml"])
def test_verify_bundled_configs(tmp_path, base, capsys):
    out = tmp_path / "out"
    assert run(["verify", "--config", _small(tmp_path, base), "--out-dir", str(out)]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert (out / "residuals.csv").exists()
    doc = _report(out)
    assert doc["subcommand"] == "verify" and all(c["ok"] for c in doc["checks"].values())


def test_expand_zero_direction(tmp_path):
    out = tmp_path / "out"
    assert run(["expand", "--config", _small(tmp_path, "zero_direction.yaml"), "--out-dir", str(out)]) == 0
    doc = _report(out)
    for h in (doc["hessian_u"], doc["hessian_v"]):
        assert h[0][1] == h[1][0] == h[1][1] == 0.0
    assert doc["grad_u"][1] == 0.0


def test_solve_writes_market(tmp_path):
    out = tmp_path / "out"
    assert run(["solve", "--config", _small(tmp_path), "--out-dir", str(out)]) == 0
    tree = json.loads((out / "market.json").read_text())
    assert tree["format"].startswith("mprsens-tree")


def test_strategies_outputs(tmp_path):
    out = tmp_path / "out"
    assert run(["strategies", "--config", _small(tmp_path), "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "strategy.csv")))
    assert len(rows) == 15
    assert (out / "deficit.csv").exists()


def test_mc_and_counterexample(tmp_path):
    out = tmp_path / "out"
    cfg = _small(tmp_path)
    assert run(["mc", "--config", cfg, "--out-dir", str(out), "--seed", "4", "--threads", "2"]) == 0
    row = next(csv.DictReader(open(out / "mc.csv")))
    assert row["seed"] == "4" and row["n_paths"] == "20000"
    assert run(["counterexample", "--config", cfg, "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "counterexample.csv")))
    assert {r["nu"] for r in rows} == {"3B^2", "0"}


def test_report_is_deterministic(tmp_path):
    cfg = _small(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["expand", "--config", cfg, "--out-dir", str(a)]) == 0
    assert run(["expand", "--config", cfg, "--out-dir", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_bad_utility_exponent(tmp_path, capsys):
    assert run(["verify", "--config", _small(tmp_path, utility__p=1.5), "--out-dir", str(tmp_path)]) == 2
    assert "utility.p" in capsys.readouterr().err


def test_bad_tolerance_scale(tmp_path):
    assert run(["verify", "--config", _small(tmp_path), "--tolerance-scale", "0", "--out-dir", str(tmp_path)]) == 2


def test_tolerance_failure_exit_code(tmp_path, capsys):
    cfg = _small(tmp_path)
    assert run(["verify", "--config", cfg, "--tolerance-scale", "1e-30", "--out-dir", str(tmp_path)]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_missing_config_file(tmp_path):
    assert run(["verify", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_config_validation_paths():
    with pytest.raises(ConfigError) as ei:
        C.validate({"market": {"kind": "binomial", "steps": 0, "dt": 0.1, "sigma": 0.2}, "utility": {"kind": "log"}})
    assert ei.value.path.startswith("market")
    cfg = C.with_defaults(yaml.safe_load((CONFIGS / "standard_tree.yaml").read_text()))
    tol = C.tolerances(cfg, 10.0)
    assert tol["duality"] == pytest.approx(1e-8)
    assert tol["slope"] == C.DEFAULTS["tolerances"]["slope"]  # thresholds that are not errors do not scale
