import json

import pytest

from airground.cli import EXIT_ACCEPT_FAIL, EXIT_CONFIG, EXIT_OK, main
from airground.model import DEFAULT_SCENARIO_PATH


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_validate_default(capsys):
    assert main(["validate", "--config", str(DEFAULT_SCENARIO_PATH)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("ok:")


def test_validate_rejects_bad_scenario(tmp_path, capsys):
    doc = json.loads(DEFAULT_SCENARIO_PATH.read_text())
    doc["flying_capacity"] = 10
    assert main(["validate", "--config", write(tmp_path / "bad.json", doc)]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_missing_file_is_config_error(tmp_path):
    assert main(["validate", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_run_writes_result_and_log(tmp_path, capsys):
    doc = json.loads(DEFAULT_SCENARIO_PATH.read_text())
    doc["task_count"] = 30
    cfg = write(tmp_path / "s.json", doc)
    rc = main(["run", "--config", cfg, "--seed", "4", "--event-log", str(tmp_path / "ev.jsonl"),
               "--out", str(tmp_path / "r.json")])
    assert rc == EXIT_OK
    result = json.loads((tmp_path / "r.json").read_text())
    assert result["seed"] == 4 and result["generated"] == 30
    lines = (tmp_path / "ev.jsonl").read_text().splitlines()
    assert lines and all(json.loads(line)["tick"] >= 0 for line in lines)
    assert "success rate" in capsys.readouterr().out


def test_run_abort_exit_code(tmp_path):
    doc = json.loads(DEFAULT_SCENARIO_PATH.read_text())
    doc["horizon"] = 1
    assert main(["run", "--config", write(tmp_path / "s.json", doc)]) == EXIT_ACCEPT_FAIL


def test_sweep_then_accept_refuses_thin_results(tmp_path, capsys):
    spec = write(tmp_path / "sp.json", {"variable": "TaskCount", "values": [10, 20], "seeds": 1, "base": {}})
    out = str(tmp_path / "f3.csv")
    assert main(["sweep", "--spec", spec, "--out-csv", out]) == EXIT_OK
    assert (tmp_path / "f3.csv.json").exists()
    assert main(["accept", "--fig3", out, "--fig4", out, "--skip-structural"]) == EXIT_ACCEPT_FAIL
    assert "insufficient replication" in capsys.readouterr().out


def test_accept_missing_csv_is_io_error(tmp_path):
    assert main(["accept", "--fig3", str(tmp_path / "a.csv"), "--fig4", str(tmp_path / "b.csv")]) == EXIT_CONFIG


def test_duplex_needs_hotspot(tmp_path):
    spec = write(tmp_path / "sp.json", {"variable": "TaskCount", "values": [10], "seeds": 1, "base": {}})
    assert main(["duplex", "--spec", spec, "--out", str(tmp_path / "d.json")]) == EXIT_CONFIG


def test_duplex_writes_json(tmp_path):
    spec = write(tmp_path / "sp.json", {
        "variable": "HotspotProportion", "values": [0.0, 0.8], "seeds": 1,
        "base": {"task_count": 40, "hotspot": {"center": [80.5, 74.5], "radius": 8.0, "proportion": 0.0}}})
    assert main(["duplex", "--spec", spec, "--out", str(tmp_path / "d.json")]) == EXIT_OK
    doc = json.loads((tmp_path / "d.json").read_text())
    assert doc["enabled"]["n"] == doc["disabled"]["n"] == 1


def test_unknown_subcommand_exits_two():
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == 2
