import csv
import json
import subprocess
import sys

import pytest
import yaml

from cocon.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, DONE, main

TINY = {
    "data": {"clips": 40, "classes": 4, "frame_size": 32},
    "model": {"width": 4, "D": 8},
    "train": {"phase1_epochs": 1, "phase2_epochs": 1, "batch": 8},
    "eval": {"epochs": 1, "decay_epoch": 1},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """dataset -> phase 1 -> phase 2 (cpc) in one run directory."""
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    common = ["--config", str(cfg), "--run-dir", str(root)]
    assert main(["dataset", *common]) == EXIT_OK
    assert main(["train", "--phase", "1", *common]) == EXIT_OK
    assert main(["train", "--phase", "2", "--ablation", "cpc", *common]) == EXIT_OK
    return root, common


def test_pipeline_outputs(pipeline):
    root, _ = pipeline
    assert (root / "dataset" / "manifest.jsonl").exists()
    for stage in (root / "phase1", root / "phase2" / "cpc"):
        assert (stage / DONE).exists()
        assert (stage / "config.yaml").exists()
        assert (stage / "rgb" / "manifest.json").exists() and (stage / "flow" / "manifest.json").exists()
    records = [json.loads(line) for line in (root / "phase2" / "cpc" / "metrics.jsonl").read_text().splitlines()]
    assert records and all("phase" in r for r in records)


def test_resolved_config_is_echoed(pipeline):
    root, _ = pipeline
    echoed = yaml.safe_load((root / "phase1" / "config.yaml").read_text())
    assert echoed["data"]["clips"] == 40
    assert echoed["loss"]["lambda"] == 10.0  # defaults are written out too


def test_eval_from_checkpoint_and_rerun_from_echoed_config(pipeline):
    root, common = pipeline
    ckpt = str(root / "phase2" / "cpc")
    assert main(["eval", "--init", ckpt, *common]) == EXIT_OK
    out = root / "eval" / "cpc-probe"
    first = json.loads((out / "report.json").read_text())
    assert set(first["top1"]) == {"rgb", "flow"}
    with open(out / "table.csv") as fh:
        assert next(csv.reader(fh))[:3] == ["config", "view", "top1"]
    echoed = str(out / "config.yaml")
    again = ["eval", "--init", ckpt, "--config", echoed, "--run-dir", str(root), "--force"]
    assert main(again) == EXIT_OK
    assert json.loads((out / "report.json").read_text()) == first


def test_rerun_is_noop_unless_forced(pipeline, capsys):
    root, common = pipeline
    marker = root / "phase1" / DONE
    stamp = marker.stat().st_mtime_ns
    weights = root / "phase1" / "rgb"
    before = {p.name: p.read_bytes() for p in weights.iterdir()}
    assert main(["train", "--phase", "1", *common]) == EXIT_OK
    assert "up to date" in capsys.readouterr().out
    assert marker.stat().st_mtime_ns == stamp
    assert main(["train", "--phase", "1", "--force", *common]) == EXIT_OK
    assert "done" in capsys.readouterr().out
    after = {p.name: p.read_bytes() for p in weights.iterdir()}
    assert after == before  # deterministic CPU path


def test_changed_config_reruns(pipeline, capsys):
    root, common = pipeline
    assert main(["dataset", *common, "--set", "data.split_seed=5"]) == EXIT_OK
    assert "wrote" in capsys.readouterr().out
    assert main(["dataset", *common]) == EXIT_OK
    assert "wrote" in capsys.readouterr().out


def test_analysis_tasks(pipeline):
    root, common = pipeline
    ckpt = str(root / "phase2" / "cpc")
    assert main(["analyze", "--task", "export", "--checkpoint", ckpt, *common]) == EXIT_OK
    store = str(root / "analysis" / "export")
    manifest = json.loads((root / "analysis" / "export" / "manifest.json").read_text())
    assert manifest["dim"] == 8
    assert main(["analyze", "--task", "histograms", "--store", store, *common]) == EXIT_OK
    assert (root / "analysis" / "histograms" / "rgb.csv").exists()
    args = ["analyze", "--task", "consistency", "--store", store, "--top-m", "2", "--min-shared", "1", *common]
    assert main(args) == EXIT_OK
    result = json.loads((root / "analysis" / "consistency" / "consistency.json").read_text())
    assert set(result["neighbors"]) == {"rgb", "flow"}
    query = manifest["records"][0]["video"]
    assert main(["analyze", "--task", "retrieve", "--store", store, "--query", str(query), "--k", "2", *common]) == EXIT_OK
    args = ["analyze", "--task", "align", "--checkpoint", ckpt, "--view", "flow", "--blocks", "6", *common]
    assert main(args) == EXIT_OK
    meta = json.loads((root / "analysis" / "align" / "align_0_0.json").read_text())
    assert meta["shape"] == [6, 6] and meta["normalization"] == "row_softmax"


def test_repro_table1_layout(tmp_path, cfg_file):
    args = ["repro-table1", "--config", cfg_file, "--run-dir", str(tmp_path), "--seeds", "0"]
    assert main(args) == EXIT_OK
    with open(tmp_path / "table1" / "table1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5 * 2
    assert {r["config"] for r in rows} == {"random", "cpc", "sim_cpc", "sync_cpc", "cocon"}
    assert {r["view"] for r in rows} == {"rgb", "flow"}


def test_run_dir_from_environment(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("COCON_RUN_DIR", str(tmp_path / "env"))
    assert main(["dataset", "--config", cfg_file]) == EXIT_OK
    assert (tmp_path / "env" / "dataset" / "manifest.jsonl").exists()


@pytest.mark.parametrize(
    "extra",
    [
        ["--set", "data.clips=-1"],
        ["--set", "data.bogus=1"],
        ["--set", "nope.key=1"],
        ["--set", "missing-equals"],
        ["--config", "/nonexistent/config.yaml"],
    ],
)
def test_config_errors_exit_2(tmp_path, extra, capsys):
    assert main(["dataset", "--run-dir", str(tmp_path), *extra]) == EXIT_CONFIG
    err = capsys.readouterr().err.strip()
    assert err.startswith("config error:") and "\n" not in err


def test_unknown_config_key_in_file_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"model": {"layers": 3}}))
    assert main(["dataset", "--config", str(path), "--run-dir", str(tmp_path)]) == EXIT_CONFIG


def test_missing_checkpoint_exit_3(tmp_path, cfg_file, capsys):
    args = ["eval", "--init", str(tmp_path / "nowhere"), "--config", cfg_file, "--run-dir", str(tmp_path)]
    assert main(args) == EXIT_RUNTIME
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: FileNotFoundError") and "\n" not in err
    assert not (tmp_path / "eval" / "nowhere-probe" / DONE).exists()


def test_analyze_without_required_input_exit_2(tmp_path, cfg_file):
    assert main(["analyze", "--task", "histograms", "--config", cfg_file, "--run-dir", str(tmp_path)]) == EXIT_CONFIG


def test_schema_lists_sections(capsys):
    assert main(["schema"]) == EXIT_OK
    schema = json.loads(capsys.readouterr().out)
    assert {"data", "model", "loss", "train", "eval"} <= set(schema["properties"])


def test_console_module_entry(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "cocon.cli", "dataset", "--run-dir", str(tmp_path), "--set", "data.clips=0"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == EXIT_CONFIG
