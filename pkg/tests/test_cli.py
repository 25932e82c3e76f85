import csv
import hashlib
import json
import subprocess

import jsonschema
import pytest

from octplaque.cli import main
from octplaque.config import ConfigError, RunConfig, load_config, save_config
from octplaque.evaluation import REPORT_SCHEMA

SMALL = ["--set", "data.phantom.frames_per_pullback=20"]


def digest(root):
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.png")):
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["generate", "--root", str(root), "--n-patients", "6", *SMALL]) == 0
    return root


@pytest.fixture(scope="module")
def trained_run(cli_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    args = [
        "train",
        "--manifest",
        str(cli_data / "manifest.jsonl"),
        "--epochs",
        "25",
        "--output-dir",
        str(out),
        "--name",
        "overfit",
        "--set",
        "pretrain.enabled=false",
        "--set",
        "augment.enabled=false",
        "--set",
        "train.lr0=0.003",
        "--set",
        "data.test_fraction=0.17",
        "--set",
        "data.val_fraction=0.2",
        "--deterministic",
    ]
    assert main(args) == 0
    (run,) = list(out.iterdir())
    return run


def test_generate_prints_distribution(cli_data, tmp_path, capsys):
    lines = (cli_data / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 120
    assert main(["generate", "--root", str(tmp_path / "again"), "--n-patients", "6", *SMALL]) == 0
    out = capsys.readouterr().out
    assert "no_plaque" in out and "wrote 120 frames" in out
    assert digest(tmp_path / "again") == digest(cli_data)


def test_default_generate_config_counts_1440():
    phantom = RunConfig().data.phantom
    assert phantom.n_patients * phantom.frames_per_pullback == 1440


def test_generate_uses_env_root(tmp_path, monkeypatch):
    monkeypatch.setenv("OCTPLAQUE_DATA_ROOT", str(tmp_path / "env"))
    assert main(["generate", "--n-patients", "2", *SMALL]) == 0
    assert (tmp_path / "env" / "manifest.jsonl").is_file()


def test_train_artifacts(trained_run):
    for name in ("config.toml", "history.csv", "history.json", "report.json", "model.json"):
        assert (trained_run / name).is_file(), name
    assert (trained_run / "weights" / "manifest.json").is_file()
    assert (trained_run / "figures").is_dir()
    assert trained_run.name.endswith("-overfit")
    jsonschema.validate(json.loads((trained_run / "report.json").read_text()), REPORT_SCHEMA)


def test_config_snapshot_round_trips(trained_run):
    cfg = load_config(trained_run / "config.toml")
    assert cfg.train.epochs == 25 and cfg.augment.enabled is False and cfg.run.deterministic
    save_config(cfg, trained_run / "copy.toml")
    assert load_config(trained_run / "copy.toml") == cfg


def test_evaluate_overfit_training_split(trained_run, tmp_path, capsys):
    out = tmp_path / "eval"
    code = main(["evaluate", str(trained_run), "--split", "train", "--out", str(out), "--csv", "--render", "P000-PB0"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["binary_metrics"]["acc"] >= 0.9
    rows = list(csv.DictReader(open(out / "predictions.csv")))
    assert len(rows) == report["n"]
    assert (out / "figures" / "P000-PB0.png").is_file()


def test_evaluate_unknown_pullback_is_usage_error(trained_run, tmp_path, capsys):
    assert main(["evaluate", str(trained_run), "--out", str(tmp_path), "--render", "NOPE"]) == 2
    assert "unknown pullback" in capsys.readouterr().err


def test_missing_manifest_is_runtime_error(tmp_path, capsys):
    code = main(["train", "--manifest", str(tmp_path / "missing.jsonl"), "--output-dir", str(tmp_path)])
    assert code == 3
    assert "manifest not found" in capsys.readouterr().err


def test_missing_checkpoint_is_runtime_error(tmp_path):
    assert main(["evaluate", str(tmp_path)]) == 3


@pytest.mark.parametrize(
    "args",
    [
        ["generate", "--set", "data.phantom.class_mix=[0.5, 0.5, 0.5]"],
        ["generate", "--set", "data.bogus=1"],
        [
            "train",
            "--set",
            "model.freeze.mode='freeze_at'",
            "--set",
            "model.freeze.point=1",
            "--set",
            "pretrain.enabled=false",
        ],
        ["train", "--set", "augment.crop_size=80"],
        ["train", "--set", "noequals"],
        ["train", "--representation", "spherical"],
        ["frobnicate"],
    ],
)
def test_config_errors_exit_2(args, tmp_path):
    assert main([*args[:1], *(["--root", str(tmp_path)] if args[0] == "generate" else []), *args[1:]]) == 2


def test_unknown_toml_keys_rejected(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[run]\nname = "x"\ncolour = "blue"\n')
    with pytest.raises(ConfigError, match="colour"):
        load_config(path)
    assert main(["train", "-c", str(path)]) == 2
    path.write_text("[run\n")
    assert main(["train", "-c", str(path)]) == 2
    assert main(["train", "-c", str(tmp_path / "absent.toml")]) == 2


def test_flags_override_file_values(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train]\nepochs = 7\nlr0 = 0.01\n")
    cfg = load_config(path, {"train.epochs": 3})
    assert cfg.train.epochs == 3 and cfg.train.lr0 == 0.01


def test_reproduce_tables_rejects_unknown_subset():
    assert main(["reproduce-tables", "--subset", "tableV"]) == 2


def test_help_and_installed_script():
    assert main(["--help"]) == 0
    proc = subprocess.run(["octplaque", "train", "--set", "data.bogus=1"], capture_output=True, text=True)
    assert proc.returncode == 2
    proc = subprocess.run(["octplaque", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("generate", "train", "evaluate", "reproduce-tables"):
        assert command in proc.stdout
