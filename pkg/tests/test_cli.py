import json
import subprocess
import sys

import pytest

from flowdistill.cli import OPTIONS, main, parse_config

FAST = ["--d", "4", "--K", "4", "--L", "2", "--H-in", "4", "--H-out", "4", "--H", "4", "--stride", "2",
        "--max-epochs", "1", "--batch-size", "32"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate", "--synth-n", "4", "--synth-t", "600", "--seed", "1", "--write-teacher", "true",
                 "--H-in", "4", "--H-out", "4", "--stride", "2", "--out", str(out)]) == 0
    return out


def test_generate_writes_dataset(tmp_path):
    assert main(["generate", "--synth-n", "16", "--synth-t", "2000", "--seed", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "flows.csv").exists() and (tmp_path / "meta.txt").exists()
    assert "regions = 16" in (tmp_path / "meta.txt").read_text()


def test_flag_beats_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 1\nlr0 = 0.01\n")
    _, merged, _ = parse_config(["train", "--data", "d/", "--seed", "7", "--config", str(cfg)])
    assert merged["seed"] == 7 and merged["lr0"] == 0.01
    assert merged["decay"] == OPTIONS["decay"][1]


def test_unknown_flag_exits_2(capsys):
    assert main(["train", "--foo", "1"]) == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("sede = 3\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "sede" in capsys.readouterr().err


def test_bad_value_names_key(tmp_path, capsys):
    assert main(["generate", "--seed", "seven", "--out", str(tmp_path)]) == 2
    assert "seed" in capsys.readouterr().err


def test_missing_data_exits_2(capsys):
    assert main(["evaluate", "--ckpt", "x.fdck"]) == 2
    assert "--data" in capsys.readouterr().err


def test_train_without_teacher_exits_2(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path)]) == 2
    assert "teacher required" in capsys.readouterr().err


def test_runtime_failure_names_stage(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "missing"), "--teacher", "oracle", "--out", str(tmp_path / "o")])
    assert code == 1
    assert "load data" in capsys.readouterr().err


def test_train_evaluate_predict(dataset, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--teacher", str(dataset / "teacher.fdtp"),
                 "--train-ratio", "0.1", "--out", str(run), *FAST]) == 0
    for name in ("best.fdck", "last.fdck", "train_log.csv", "effective_config.txt"):
        assert (run / name).exists(), name
    ev = tmp_path / "ev"
    assert main(["evaluate", "--data", str(dataset), "--ckpt", str(run / "best.fdck"), "--out", str(ev), *FAST]) == 0
    doc = json.loads((ev / "report.json").read_text())
    assert len(doc["rows"]) == 4 and doc["metrics"]["mae"] > 0
    pr = tmp_path / "pr"
    assert main(["predict", "--data", str(dataset), "--ckpt", str(run / "best.fdck"), "--out", str(pr), *FAST]) == 0
    assert (pr / "predictions.fdtp").exists()


def test_evaluate_takes_architecture_from_checkpoint(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--teacher", "oracle", "--out", str(run), *FAST]) == 0
    window_flags = ["--H-in", "4", "--H-out", "4", "--H", "4", "--stride", "2"]
    assert main(["evaluate", "--data", str(dataset), "--ckpt", str(run / "best.fdck"), "--out",
                 str(tmp_path / "ev"), *window_flags]) == 0
    # a horizon the checkpoint was not built for is a runtime failure at checkpoint load
    assert main(["evaluate", "--data", str(dataset), "--ckpt", str(run / "best.fdck"), "--out",
                 str(tmp_path / "ev2"), "--H-in", "6", "--H-out", "4", "--stride", "2"]) == 1
    assert "H_in" in capsys.readouterr().err


def test_effective_config_reproduces_run(dataset, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--data", str(dataset), "--teacher", "oracle", "--seed", "3", "--out", str(first),
                 *FAST]) == 0
    assert main(["train", "--config", str(first / "effective_config.txt"), "--out", str(second)]) == 0
    assert (first / "train_log.csv").read_text() == (second / "train_log.csv").read_text()


def test_config_file_alone(dataset, tmp_path):
    cfg = tmp_path / "run.cfg"
    lines = [f"data = {dataset}", "teacher = oracle", f"out = {tmp_path / 'o'}", "d = 4", "K = 4", "L = 2",
             "H_in = 4", "H_out = 4", "H = 4", "stride = 2", "max_epochs = 1"]
    cfg.write_text("\n".join(lines) + "\n")
    assert main(["train", "--config", str(cfg)]) == 0
    assert "max_epochs = 1" in (tmp_path / "o" / "effective_config.txt").read_text()


def test_sweep_report_has_one_row_per_cell(dataset, tmp_path):
    assert main(["sweep", "--data", str(dataset), "--teacher", "oracle", "--ratios", "0.1,0.3,0.5",
                 "--seeds", "3", "--out", str(tmp_path), *FAST]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert len(doc["rows"]) == 9
    assert (tmp_path / "table.csv").read_text().startswith("Model,10% MAE")


def test_ablate(dataset, tmp_path):
    assert main(["ablate", "--data", str(dataset), "--teacher", "oracle", "--seeds", "1", "--out", str(tmp_path),
                 *FAST]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert [r["variant"] for r in doc["rows"]] == ["full", "w/o-TB", "w/o-IB", "w/o-SC", "w/o-TC"]


def test_export_prompts(dataset, tmp_path):
    assert main(["export-prompts", "--data", str(dataset), "--H-in", "4", "--H-out", "4", "--stride", "2",
                 "--prompt-limit", "3", "--out", str(tmp_path)]) == 0
    files = sorted((tmp_path / "prompts").iterdir())
    assert len(files) == 3
    assert "Given the historical data for taxi flow over 4 time steps" in files[0].read_text()


def test_bench(tmp_path):
    assert main(["bench", "--synth-n", "4", "--d", "4", "--K", "4", "--repetitions", "1", "--bench-windows", "8",
                 "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["unstable"] is True and "region_exponent" in doc


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "flowdistill.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "export-prompts" in res.stdout
