import json

import pytest

from textleak.cli import main

from test_harness import QUICK


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text(QUICK)
    return path


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--bogus"])
    assert exc.value.code == 2


def test_verify_single_suite(capsys):
    assert main(["verify", "--suite", "exactness"]) == 0
    assert "PASS exactness" in capsys.readouterr().out


def test_attack_prints_one_record(cfg_file, tmp_path, capsys):
    out = tmp_path / "one.jsonl"
    assert main(["attack", "--config", str(cfg_file), "--seed", "7", "--output", str(out)]) == 0
    record = json.loads(capsys.readouterr().out)
    assert record["seed"] == 7 and record["type"] == "run"
    assert json.loads(out.read_text()) == record


def test_grid_then_score(cfg_file, tmp_path, capsys):
    out = tmp_path / "grid.jsonl"
    assert main(["grid", "--config", str(cfg_file), "--output", str(out)]) == 0
    aggs = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert {a["method"] for a in aggs if a["type"] == "aggregate"} == {"grab", "dlg"}
    rescored = tmp_path / "rescored.jsonl"
    assert main(["score", "--input", str(out), "--output", str(rescored)]) == 0
    fresh = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [a["mean"] for a in fresh] == [a["mean"] for a in aggs if a["type"] == "aggregate"]


def test_train_reports_mcc(cfg_file, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    log = tmp_path / "rounds.jsonl"
    assert main(["train", "--config", str(cfg_file), "--rounds", "3", "--checkpoint", str(ckpt),
                 "--log", str(log)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["type"] == "train" and -1 <= report["mcc_after"] <= 1
    assert ckpt.exists() and len(log.read_text().splitlines()) == 3


def test_missing_config_fails_cleanly(tmp_path, capsys):
    assert main(["attack", "--config", str(tmp_path / "absent.cfg")]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_key_fails_cleanly(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("model.colour = 3\n")
    assert main(["grid", "--config", str(path)]) == 1
