import json

import pytest

from elastofusion.cli import run_command
from elastofusion.config import env_overrides, load_config
from elastofusion.core import Label
from elastofusion.errors import ConfigError, MetricsError, ReportError
from elastofusion.metrics import Prediction, build_cv_report
from elastofusion.report import render_report


def _fold(shift):
    rows = [("a", 0, 0.2), ("a", 0, 0.3 + shift), ("b", 1, 0.9), ("c", 0, 0.6 - shift), ("d", 1, 0.8 - shift)]
    return [Prediction(f"{p}_{i}", p, Label(t), 1 - m, m) for i, (p, t, m) in enumerate(rows)]


@pytest.fixture
def reports():
    folds = [_fold(s) for s in (0.0, 0.05, 0.1, 0.15, 0.3)]
    other = [_fold(s / 2) for s in (0.0, 0.05, 0.1, 0.15, 0.3)]
    return [build_cv_report(folds, "ensemble", "bse", True), build_cv_report(other, "alexnet", "bse", True)]


def test_render_tables(tmp_path, reports):
    paths = render_report(reports, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == ["metrics.csv", "patients.csv", "ppv_ttest.csv", "recognition.csv", "report.json"]
    metrics = (tmp_path / "metrics.csv").read_text().splitlines()
    assert metrics[0].startswith("modality,crop,model,granularity,accuracy")
    models = [line.split(",")[2] for line in metrics[1:]]
    # member rows come before the ensemble rows
    assert models == ["alexnet", "alexnet", "ensemble", "ensemble"]
    assert "90.00 ± 0.00" not in metrics[1] and "±" in metrics[1]
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc and "±" in (tmp_path / "metrics.csv").read_text()
    assert "ppv_ttest.csv" in names


def test_rerender_is_byte_identical(tmp_path, reports):
    a = {p.name: p.read_bytes() for p in render_report(reports, tmp_path / "a")}
    b = {p.name: p.read_bytes() for p in render_report(list(reversed(reports)), tmp_path / "b")}
    assert a == b


def test_render_errors(tmp_path, reports):
    with pytest.raises(MetricsError):
        render_report([], tmp_path)
    with pytest.raises(ReportError):
        render_report(reports, tmp_path, formats=("xml",))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportError):
        render_report(reports, blocker / "sub")


def test_config_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 1\ntrain:\n  max_epochs: 10\n  batch_size: 4\n")
    env = {"ELASTOFUSION_TRAIN__BATCH_SIZE": "8", "ELASTOFUSION_SEED": "2",
           "ELASTOFUSION_WEIGHTS_DIR": "/w"}
    cfg = load_config(path, environ=env, flags={"seed": 3})
    assert cfg.seed == 3 and cfg.train.batch_size == 8 and cfg.train.max_epochs == 10
    assert cfg.io.cache_dir == "/w"
    tc = cfg.train_config()
    assert tc.patience == 10 and tc.weights_dir == "/w"
    assert env_overrides({"OTHER": "1"}) == {}


def test_config_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError):
        load_config(environ={}, flags={"train": {"max_epoch": 3}})
    with pytest.raises(ConfigError):
        load_config(environ={}, flags={"model": {"name": "vgg"}})
    with pytest.raises(ConfigError):
        load_config(environ={}).train_config()
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(bad, environ={})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml", environ={})
    cfg = load_config(environ={}, flags={"train": {"max_epochs": 4}})
    again = tmp_path / "again.yaml"
    cfg.save(again)
    assert load_config(again, environ={}) == cfg


def test_cli_usage_codes(capsys):
    assert run_command(["--help"]) == 0
    assert run_command(["train", "--help"]) == 0
    assert run_command([]) == 2
    assert run_command(["bogus"]) == 2
    assert run_command(["train", "--no-such-flag"]) == 2
    assert run_command(["train", "--max-ep", "3"]) == 2


def test_cli_error_codes(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_command(["train", "--model", "resnet18"]) == 3  # no max_epochs
    assert run_command(["split", "--manifest", str(tmp_path / "none.jsonl")]) == 4
    assert run_command(["eval", "--run", str(tmp_path / "nowhere")]) == 4


@pytest.mark.slow
def test_cli_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    data, run = str(tmp_path / "data"), str(tmp_path / "run")
    common = ["--seed", "4"]
    assert run_command(["synth", *common, "--patients", "16", "--out", data]) == 0
    cfg = tmp_path / "c.yaml"
    cfg.write_text("data:\n  synth:\n    image_size: 64\n    images_per_patient: [2, 2]\n")
    assert run_command(["synth", "--config", str(cfg), *common, "--patients", "16", "--out", data]) == 0
    manifest = str(tmp_path / "data" / "manifest.jsonl")
    assert run_command(["split", *common, "--manifest", manifest, "--folds", "2",
                        "--out", str(tmp_path / "split.json")]) == 0
    assert run_command(["train", *common, "--model", "resnet18", "--manifest", manifest, "--folds", "2",
                        "--max-epochs", "2", "--no-augment", "--weights", "random", "--run", run,
                        "--split", str(tmp_path / "split.json")]) == 0
    assert (tmp_path / "run" / "config.yaml").exists()
    capsys.readouterr()
    assert run_command(["eval", "--run", run, "--patient-wise"]) == 0
    out = capsys.readouterr().out
    assert "resnet18" in out and "patient" in out
    assert run_command(["report", "--run", run, "--format", "csv"]) == 0
    assert (tmp_path / "run" / "report" / "metrics.csv").exists()
    assert not (tmp_path / "run" / "report" / "report.json").exists()
    image = json.loads((tmp_path / "data" / "manifest.jsonl").read_text().splitlines()[0])["image_id"]
    assert run_command(["gradcam", "--run", run, "--image", image, "--export-raw",
                        "--out", str(tmp_path / "cam")]) == 0
    pngs = list((tmp_path / "cam").glob("*.png"))
    assert len(pngs) == 1 and pngs[0].name.startswith(image + "_bse_")
    assert list((tmp_path / "cam").glob("*.npy"))
