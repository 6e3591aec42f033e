import json
import os

import pytest

from ecgcl import cli
from ecgcl.signals import read_manifest

SMALL = ["--patients", "10", "--frames", "4", "--leads", "2", "--classes", "2", "--s", "400", "--seed", "3"]
FAST = ["--e", "8", "--epochs", "2", "--batch-size", "16", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--out", str(root)] + SMALL) == 0
    return root


def test_synth_default_entry_count(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["synth", "--out", str(out), "--s", "256"]) == 0
    assert len(read_manifest(out).entries) == 40 * 8 * 4


def test_synth_rejects_single_class(tmp_path, capsys):
    code = cli.main(["synth", "--out", str(tmp_path / "x"), "--classes", "1"])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["command"] == "synth" and "classes" in err["message"]


def test_synth_is_byte_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", "--out", str(tmp_path / name)] + SMALL) == 0
    for path in (tmp_path / "a").rglob("*"):
        if path.is_file():
            assert path.read_bytes() == (tmp_path / "b" / path.relative_to(tmp_path / "a")).read_bytes()


@pytest.mark.parametrize("command", ["pretrain", "lineval", "finetune", "distances"])
def test_commands_are_deterministic(command, data_dir, tmp_path):
    ckpt = None
    if command != "pretrain":
        assert cli.main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path), "--run-name", "pre"]
                        + FAST) == 0
        ckpt = str(tmp_path / "pre" / "ckpt")
    outputs = []
    for name in ("r1", "r2"):
        argv = [command, "--data", str(data_dir), "--out", str(tmp_path), "--run-name", name, "--seed", "4"]
        if ckpt:
            argv += ["--checkpoint", ckpt]
        if command in ("pretrain", "lineval", "finetune"):
            argv += ["--epochs", "2", "--batch-size", "16"]
        if command == "pretrain":
            argv += ["--e", "8"]
        assert cli.main(argv) == 0
        files = ["metrics.csv", "summary.json"] + ([] if command == "distances" else ["ckpt"])
        outputs.append({f: (tmp_path / name / f).read_bytes() for f in files})
    assert outputs[0] == outputs[1]
    summary = json.loads(outputs[0]["summary.json"])
    assert summary["command"] == command and summary["seed"] == 4
    if command in ("lineval", "finetune"):
        assert 0 <= summary["test_auc"] <= 1


def test_run_directory_is_protected(data_dir, tmp_path, capsys):
    argv = ["pretrain", "--data", str(data_dir), "--out", str(tmp_path), "--run-name", "x"] + FAST
    assert cli.main(argv) == 0
    assert cli.main(argv) == 2
    assert "FileExistsError" in capsys.readouterr().err
    assert cli.main(argv + ["--force"]) == 0


def test_default_run_directory_name(data_dir, tmp_path, capsys):
    assert cli.main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path), "--seed", "7"] + FAST) == 0
    (name,) = os.listdir(tmp_path)
    assert name.startswith("pretrain-") and name.endswith("-seed7")


def test_config_file_defaults_and_flag_override(data_dir, tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"epochs": 1, "e": 8, "tau": 0.5, "batch_size": 16}))
    assert cli.main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path), "--run-name", "c",
                     "--config", str(config), "--tau", "0.2"]) == 0
    summary = json.loads((tmp_path / "c" / "summary.json").read_text())
    assert summary["config"]["tau"] == 0.2 and summary["config"]["epochs"] == 1


def test_config_file_lists_every_unknown_key(data_dir, tmp_path, capsys):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"epochz": 1, "temp": 0.5}))
    code = cli.main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path), "--config", str(config)])
    assert code == 2
    msg = json.loads(capsys.readouterr().err)["message"]
    assert "epochz" in msg and "temp" in msg


def test_invalid_values_reported_together(data_dir, tmp_path, capsys):
    code = cli.main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path), "--lr", "0", "--tau", "-1"])
    assert code == 2
    msg = json.loads(capsys.readouterr().err)["message"]
    assert "lr" in msg and "tau" in msg


def test_missing_data_directory_is_single_line_error(tmp_path, capsys):
    code = cli.main(["pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert code == 2 and err.count("\n") == 1
    assert json.loads(err)["error"] == "FileNotFoundError"


@pytest.mark.parametrize("command", ["synth", "pretrain", "lineval", "finetune", "distances", "gradcheck"])
def test_help_lists_flags_with_defaults(command, capsys):
    with pytest.raises(SystemExit):
        cli.main([command, "--help"])
    text = capsys.readouterr().out
    if command == "pretrain":
        for flag, default in [("--tau", "0.1"), ("--lr", "0.0001"), ("--e", "128"), ("--batch-size", "256"),
                              ("--tau-d", "0.9"), ("--epochs", "50")]:
            assert flag in text
            assert f"default: {default})" in text
    if command == "synth":
        assert "--patients" in text and "default: 40)" in text
    if command in cli.COMMANDS:
        for flag in cli.COMMANDS[command]:
            assert "--" + flag.replace("_", "-") in text


def test_gradcheck_single_operator(capsys):
    assert cli.main(["gradcheck", "--op", "mse", "--op", "relu"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and all(line.endswith("ok") for line in lines)
