import json
import os
import shutil
import subprocess
import sys

import pytest

from tfcal import cli


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.run(["gen-data", "--out", str(data), "--set", "n_per_cell=4", "--set", "image_size=16"]) == 0
    run_cfg = root / "run.json"
    run_cfg.write_text(json.dumps({"version": 1, "dataset": str(data), "epochs": 3, "batch_size": 16}))
    assert cli.run(["train", "--config", str(run_cfg), "--out", str(root / "runs" / "a")]) == 0
    return root


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    lines = [l for l in err if l.startswith("tfcal-error: ")]
    assert len(lines) == 1
    return lines[0].split(": ")[1]


def test_workflow_outputs(workspace):
    data = workspace / "data"
    assert (data / "manifest.json").exists() and (data / "outputs.json").exists()
    run = workspace / "runs" / "a"
    for name in ("manifest.txt", "prototype.tfc", "report.json", "config.json", "outputs.json"):
        assert (run / name).exists(), name
    echoed = json.loads((run / "outputs.json").read_text())
    assert echoed["command"] == "train" and echoed["config"]["epochs"] == 3


def test_eval_writes_json(workspace, capsys):
    run = workspace / "runs" / "a"
    assert cli.run(["eval", "--ckpt", str(run), "--calibrated"]) == 0
    out = capsys.readouterr().out
    assert "target accuracy" in out
    doc = json.loads((run / "eval.json").read_text())
    assert doc["tau"] == 0.5 and doc["calibrated"] is True
    assert 0 <= doc["accuracy"] <= 1 and doc["n"] == 16


def test_inspect_prints_prototype_summary(workspace, capsys):
    assert cli.run(["inspect", "--ckpt", str(workspace / "runs" / "a")]) == 0
    out = capsys.readouterr().out
    assert "prototype shape: (1, 32, 4, 4)" in out
    assert "prototype epoch: 2" in out
    assert "min" in out and "mean" in out and "max" in out
    assert "config digest:" in out


def test_export(workspace):
    out = workspace / "emb"
    assert cli.run(["export", "--ckpt", str(workspace / "runs" / "a"), "--stage", "post-style",
                    "--out", str(out)]) == 0
    lines = (out / "embeddings.csv").read_text().splitlines()
    assert len(lines) == 65


def test_ablate_and_sweep(workspace):
    cfg = workspace / "runs" / "a" / "config.json"
    out = workspace / "grid"
    assert cli.run(["ablate", "--config", str(cfg), "--out", str(out), "--seeds", "0",
                    "--set", "epochs=1"]) == 0
    assert (out / "ablation.csv").exists() and (out / "outputs.json").exists()
    assert cli.run(["sweep", "--config", str(cfg), "--out", str(out), "--seeds", "0", "--axis", "strength",
                    "--set", "epochs=1"]) == 0
    assert len(json.loads((out / "sweep_strength.json").read_text())["cells"]) == 5


def test_uncalibrated_checkpoint_rejected(workspace, capsys):
    broken = workspace / "noproto"
    shutil.copytree(workspace / "runs" / "a", broken)
    os.remove(broken / "prototype.tfc")
    assert cli.run(["eval", "--ckpt", str(broken), "--calibrated"]) == cli.EXIT_UNCALIBRATED
    assert error_line(capsys) == "uncalibrated"
    assert cli.run(["eval", "--ckpt", str(broken)]) == 0


def test_error_categories(workspace, tmp_path, capsys):
    assert cli.run(["frobnicate"]) == cli.EXIT_USAGE
    assert error_line(capsys) == "usage"
    assert cli.run(["train", "--out", str(tmp_path), "--bogus"]) == cli.EXIT_USAGE
    assert error_line(capsys) == "usage"

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.run(["train", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert error_line(capsys) == "config"
    bad.write_text(json.dumps({"version": 1, "learning_rate": 3}))
    assert cli.run(["train", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert error_line(capsys) == "config"
    assert cli.run(["train", "--out", str(tmp_path), "--set", "optim.lr=1"]) == cli.EXIT_CONFIG
    assert error_line(capsys) == "config"

    assert cli.run(["train", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == cli.EXIT_MISSING
    assert error_line(capsys) == "missing-file"
    assert cli.run(["inspect", "--ckpt", str(tmp_path / "nowhere")]) == cli.EXIT_MISSING
    assert error_line(capsys) == "missing-file"

    corrupt = tmp_path / "corrupt"
    shutil.copytree(workspace / "runs" / "a", corrupt)
    (corrupt / "params" / "block1.0.weight.tfc").write_bytes(b"TFC1\x01")
    assert cli.run(["inspect", "--ckpt", str(corrupt)]) == cli.EXIT_FORMAT
    assert error_line(capsys) == "format"


def test_precision_env_override(workspace, monkeypatch):
    monkeypatch.setenv("TFCAL_PRECISION", "double")
    out = workspace / "runs" / "double"
    cfg = workspace / "runs" / "a" / "config.json"
    assert cli.run(["train", "--config", str(cfg), "--out", str(out), "--set", "epochs=1"]) == 0
    assert "precision: double" in (out / "manifest.txt").read_text()


def test_help_documents_every_flag_and_exit_code():
    parser = cli.build_parser()
    text = parser.format_help()
    for code, name, _ in cli.EXIT_CODES:
        assert f"  {code}  {name}" in text
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"gen-data", "train", "eval", "ablate", "sweep", "export", "inspect"}
    for name, sp in sub.choices.items():
        help_text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in help_text, (name, opt)
        for code, cat, _ in cli.EXIT_CODES:
            assert f"  {code}  {cat}" in help_text
    assert "--tau TAU" in sub.choices["eval"].format_help() and "default 0.5" in sub.choices["eval"].format_help()


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "tfcal.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "exit codes:" in proc.stdout
