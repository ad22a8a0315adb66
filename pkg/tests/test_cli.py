"""Command-line entry point: artifacts, determinism, embedded provenance."""

import json
import os
from pathlib import Path

import pytest

from duocraft.analysis import read_csv
from duocraft.cli import build_parser, format_command, main
from duocraft.session import read_log, replay


@pytest.fixture(scope="module")
def log_dir(tmp_path_factory):
    """A small simulated corpus shared by the train/eval/analyze tests."""
    out = tmp_path_factory.mktemp("logs")
    rc = main([
        "simulate", "--config", "disparate-disparate", "--seed", "41",
        "--episodes", "5", "--out", str(out),
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(log_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    rc = main([
        "train", "--logs", str(log_dir), "--epochs", "2", "--quiet",
        "--out", str(out),
    ])
    assert rc == 0
    return out / "model-rnn-dv-0.ckpt"


def test_format_command_quotes_arguments():
    cmd = format_command(["simulate", "--out", "my dir"])
    assert cmd == "duocraft simulate --out 'my dir'"


def test_generate_is_deterministic(tmp_path):
    argv = ["generate", "--config", "shared-disparate", "--seed", "7",
            "--out", str(tmp_path)]
    assert main(argv) == 0
    path = tmp_path / "task-shared-disparate-7.json"
    first = path.read_bytes()
    assert main(argv) == 0
    assert path.read_bytes() == first

    doc = json.loads(first)
    assert doc["command"] == format_command(argv)
    assert doc["seed"] == 7
    assert doc["config"] == {"skills": "shared", "knowledge": "disparate"}
    assert set(doc["hidden"]) == {"0", "1"}
    assert doc["hidden"]["0"] and doc["hidden"]["1"]
    assert len(doc["names"]["materials"]) == doc["graph"]["V"]


def test_simulate_logs_replay_and_results_csv(log_dir):
    logs = sorted(log_dir.glob("*.mclog.jsonl"))
    assert len(logs) == 5
    for path in logs:
        lines = read_log(str(path))
        assert replay(lines) == lines

    command, rows = read_csv(str(log_dir / "results.csv"))
    assert command is not None and command.startswith("duocraft simulate")
    assert len(rows) == 5
    assert {r["config"] for r in rows} == {"disparate-disparate"}
    assert [r["seed"] for r in rows] == [str(41 + i) for i in range(5)]
    for r in rows:
        assert r["log"] == f"episode-disparate-disparate-{r['seed']}.mclog.jsonl"
        assert int(r["ticks"]) > 0
        assert int(r["popups"]) >= 0


def test_train_writes_checkpoint_and_curves(checkpoint):
    from duocraft.beliefnet import load_checkpoint

    assert checkpoint.exists()
    model, extra = load_checkpoint(str(checkpoint))
    assert extra["command"].startswith("duocraft train")
    assert extra["train"]["max_epochs"] == 2
    assert set(extra["split"]) == {"train", "val", "test"}

    command, rows = read_csv(str(checkpoint.parent / "model-rnn-dv-0-curves.csv"))
    assert command.startswith("duocraft train")
    assert len(rows) == 2
    assert [r["epoch"] for r in rows] == ["0", "1"]
    for r in rows:
        assert 0.0 <= float(r["val_f1"]) <= 1.0


def test_train_same_seed_reproduces_checkpoint(log_dir, tmp_path):
    argv = ["train", "--logs", str(log_dir), "--epochs", "1", "--quiet",
            "--out", str(tmp_path)]
    assert main(argv) == 0
    ckpt = tmp_path / "model-rnn-dv-0.ckpt"
    first = ckpt.read_bytes()
    assert main(argv) == 0
    assert ckpt.read_bytes() == first


def test_eval_writes_metrics_csv(log_dir, checkpoint, tmp_path):
    rc = main([
        "eval", "--logs", str(log_dir), "--checkpoint", str(checkpoint),
        "--out", str(tmp_path),
    ])
    assert rc == 0
    command, rows = read_csv(str(tmp_path / "eval.csv"))
    assert command.startswith("duocraft eval")
    by_type = {r["qtype"]: r for r in rows}
    assert set(by_type) >= {"completed_task", "player_knowledge",
                            "current_task", "overall"}
    for qtype in ("completed_task", "player_knowledge", "current_task"):
        row = by_type[qtype]
        assert 0.0 <= float(row["f1"]) <= 1.0
        assert 0.0 <= float(row["majority_f1"]) <= 1.0
        assert 0.0 < float(row["chance"]) < 1.0


def test_eval_in_situ_csvs(log_dir, checkpoint, tmp_path):
    rc = main([
        "eval", "--logs", str(log_dir), "--checkpoint", str(checkpoint),
        "--in-situ", "--out", str(tmp_path),
    ])
    assert rc == 0
    _, rows = read_csv(str(tmp_path / "insitu.csv"))
    assert rows
    scored = [r for r in rows if r["scored"] == "True"]
    assert scored, "at least one pair should be scored in situ"
    for r in scored:
        assert r["match"] in ("True", "False")
        assert r["perspective"] == "other"
    _, hist = read_csv(str(tmp_path / "insitu-deciles.csv"))
    assert [r["decile"] for r in hist] == [str(d) for d in range(10)]
    total = sum(int(r["total"]) for r in hist)
    assert total == len(scored)


def test_analyze_writes_expected_csvs(log_dir, tmp_path):
    rc = main([
        "analyze", "--logs", str(log_dir), "--check-replay",
        "--out", str(tmp_path),
    ])
    assert rc == 0
    for name in ("config-table", "deciles", "decile-fits", "windows"):
        command, rows = read_csv(str(tmp_path / f"{name}.csv"))
        assert command.startswith("duocraft analyze"), name
    _, table = read_csv(str(tmp_path / "config-table.csv"))
    assert len(table) == 1
    assert table[0]["config"] == "disparate-disparate"
    assert int(table[0]["games"]) == 5


def test_out_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DUOCRAFT_OUT", str(tmp_path))
    assert main(["generate", "--seed", "1"]) == 0
    assert (tmp_path / "task-shared-shared-1.json").exists()


def test_missing_logs_dir_fails(tmp_path):
    with pytest.raises(SystemExit):
        main(["train", "--logs", str(tmp_path / "empty"), "--quiet"])


def test_bad_arguments_exit_nonzero():
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--config", "bogus"])
    assert err.value.code != 0
    with pytest.raises(SystemExit):
        main(["no-such-command"])
    with pytest.raises(SystemExit):
        main([])


def test_serve_parser_wiring():
    parser = build_parser()
    args = parser.parse_args(["serve", "--host", "0.0.0.0", "--port", "9001"])
    assert args.host == "0.0.0.0" and args.port == 9001
    assert args.func.__name__ == "cmd_serve"
