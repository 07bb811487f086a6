import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from inspectsim.cli import main
from inspectsim.model import animals_config

ROOT = Path(__file__).resolve().parents[1]
ANIMALS = str(ROOT / "instances" / "animals.json")


def invoke(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    doc = json.loads(out)  # exactly one JSON document on stdout
    return code, doc, err


def test_validate(capsys):
    code, doc, _ = invoke(capsys, "validate", ANIMALS)
    assert code == 0 and doc["ok"] and doc["valid"]
    assert doc["constants"]["d_bar"] == pytest.approx(0.549306, abs=1e-6)
    assert all(doc["conditions"].values())


def test_validate_builtin(capsys):
    code, doc, _ = invoke(capsys, "validate", "animals")
    assert code == 0 and doc["labels"] == ["cat", "dog", "rabbit"]


def test_validate_degenerate(capsys, tmp_path):
    bad = tmp_path / "same.json"
    bad.write_text(json.dumps(animals_config(0.5, 0.5)))
    code, doc, err = invoke(capsys, "validate", str(bad))
    assert code == 1 and doc["error"] == "DegenerateLabels"
    assert "DegenerateLabels" in err


def test_malformed_json(capsys, tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text('{\n  "labels": ["a", "b"],\n  "prior": [0.5 0.5]\n}\n')
    code, doc, err = invoke(capsys, "validate", str(bad))
    assert code == 1 and doc["line"] == 3
    assert "line 3" in err


def test_missing_file(capsys, tmp_path):
    code, doc, _ = invoke(capsys, "validate", str(tmp_path / "nope.json"))
    assert code == 1 and not doc["ok"]


def test_flp(capsys):
    code, doc, _ = invoke(capsys, "flp", ANIMALS, "--delta", "0.049787")
    assert code == 0
    assert doc["m_star_f"] == pytest.approx(5.4615, rel=1e-4)
    assert doc["b_delta"] == pytest.approx(0.81752, abs=1e-4)
    assert doc["invariants_ok"] is True


@pytest.mark.parametrize("argv", [
    ["frobnicate", ANIMALS],
    ["simulate", ANIMALS, "--policy", "heuristic", "--delta", "0.05", "--m", "40", "--horizon", "10"],
    ["flp", ANIMALS],
    [],
])
def test_usage_errors(capsys, argv):
    code = main(argv)
    out, _ = capsys.readouterr()
    assert code == 2
    assert json.loads(out)["ok"] is False


def test_unknown_override_is_usage_error(capsys, tmp_path):
    code, doc, _ = invoke(capsys, "prep-error", ANIMALS, "--delta", "0.05", "--seed", "1",
                          "--samples", "10", "--override", "bogus=3", "--out", str(tmp_path))
    assert code == 2 and doc["error"] == "UsageError"


def test_infeasible_budget_is_domain_error(capsys, tmp_path):
    code, doc, _ = invoke(capsys, "simulate", ANIMALS, "--policy", "three-stage", "--delta", "0.05",
                          "--m", "50", "--horizon", "10", "--seed", "1", "--out", str(tmp_path))
    assert code == 1 and doc["error"] == "InfeasibleRegime"


def run_sim(capsys, out, *extra):
    return invoke(capsys, "simulate", ANIMALS, "--policy", "heuristic", "--delta", "0.05", "--m", "40",
                  "--horizon", "5000", "--seed", "7", "--out", str(out), *extra)


def test_simulate_byte_identical(capsys, tmp_path):
    code, doc, _ = run_sim(capsys, tmp_path / "a", "--plot")
    assert code == 0
    first_json = json.dumps(doc, sort_keys=True).replace(str(tmp_path / "a"), "OUT")
    _, again, _ = run_sim(capsys, tmp_path / "b", "--plot")
    assert json.dumps(again, sort_keys=True).replace(str(tmp_path / "b"), "OUT") == first_json
    for name in ("timeseries.csv", "timeseries.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert doc["seed"] == 7 and len(doc["config_digest"]) == 64
    with open(tmp_path / "a" / "timeseries.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header[:2] == ["time", "Q"]


def test_simulate_seed_changes_output(capsys, tmp_path):
    _, a, _ = run_sim(capsys, tmp_path)
    code = main(["simulate", ANIMALS, "--policy", "heuristic", "--delta", "0.05", "--m", "40",
                 "--horizon", "5000", "--seed", "8", "--out", str(tmp_path)])
    b = json.loads(capsys.readouterr().out)
    assert code == 0 and a["report_digest"] != b["report_digest"]


def test_output_dir_from_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("INSPECTSIM_OUT", str(tmp_path / "env"))
    code, doc, _ = invoke(capsys, "simulate", ANIMALS, "--policy", "oracle", "--delta", "0.05", "--m", "12",
                          "--horizon", "50", "--seed", "1")
    assert code == 0 and (tmp_path / "env" / "timeseries.csv").exists()


def test_config_file_and_flag_precedence(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"policy": "oracle", "delta": 0.05, "m": 12, "horizon": 200,
                               "seed": 3, "out": str(tmp_path / "o")}))
    code, doc, _ = invoke(capsys, "simulate", ANIMALS, "--config", str(cfg), "--m", "14")
    assert code == 0
    assert doc["config"]["m"] == 14 and doc["config"]["policy"] == "oracle"
    assert doc["config"]["horizon"] == 200


def test_config_overrides_block(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"delta": 0.05, "seed": 1, "samples": 50, "overrides": {"n_prep": 0},
                               "out": str(tmp_path)}))
    code, doc, _ = invoke(capsys, "prep-error", ANIMALS, "--config", str(cfg))
    assert code == 0 and doc["n_prep"] == 0 and doc["overall"] == pytest.approx(2 / 3)


def test_config_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"colour": "blue"}))
    code = main(["flp", ANIMALS, "--config", str(cfg)])
    capsys.readouterr()
    assert code == 2


def test_sweep_rows(capsys, tmp_path):
    code, doc, _ = invoke(capsys, "sweep", ANIMALS, "--policy", "oracle", "--deltas", "1e-2,1e-3,1e-4",
                          "--replicas", "1", "--horizon", "2000", "--seed", "2", "--out", str(tmp_path))
    assert code == 0 and len(doc["rows"]) == 3
    with open(tmp_path / "sweep.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["delta", "m_psi", "m_star_f", "b_delta", "ratio", "envelope", "error"]
    assert len(rows) == 4


def test_fluid(capsys, tmp_path):
    code, doc, _ = invoke(capsys, "fluid", ANIMALS, "--delta", str(0.049787068367863944), "--m", "10000",
                          "--mqa-factor", "10", "--samples", "8", "--T", "3", "--dt", "0.02",
                          "--seed", "1", "--out", str(tmp_path))
    assert code == 0 and doc["success"] and doc["threshold_met"]
    assert (tmp_path / "fluid.csv").exists()


def test_fluid_below_threshold_refused(capsys, tmp_path):
    code, doc, _ = invoke(capsys, "fluid", ANIMALS, "--delta", "0.05", "--m", "10000", "--mqa-factor", "0.5",
                          "--samples", "4", "--seed", "1", "--out", str(tmp_path))
    assert code == 1 and doc["error"] == "ThresholdNotMet"


def test_capacity(capsys, tmp_path):
    code, doc, _ = invoke(capsys, "capacity", ANIMALS, "--policy", "oracle", "--delta", str(0.049787068367863944),
                          "--m-lo", "4", "--m-hi", "16", "--replicas", "3", "--horizon", "10000",
                          "--seed", "2", "--out", str(tmp_path))
    assert code == 0 and doc["m_psi"] == 9


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "inspectsim.cli", "flp", ANIMALS, "--delta", "0.1"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["ok"] is True
