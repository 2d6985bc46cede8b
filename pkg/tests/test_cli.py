import csv
import json

import pytest
import torch
from conftest import small_radar_config

from miiad.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from miiad.config import DataConfig, ExperimentConfig
from miiad.io import load_dataset, read_tensor


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = ExperimentConfig(data=DataConfig(categories=("dome",), n_train=8, n_test=6), model=small_radar_config())
    cfg.save(root / "small.json")
    assert main(["synth", "--categories", "dome", "--n-train", "8", "--n-test", "6", "--out", str(root / "raw")]) == 0
    assert main(["missing", "--mode", "pc", "--rate", "0.5", str(root / "raw"), str(root / "data")]) == 0
    return root


def test_missing_writes_masks(workspace):
    ds = load_dataset(workspace / "data")
    assert sum(not s.mask.has_pc for s in ds.train) == 4
    assert sum(not s.mask.has_pc for s in ds.test) == 3


def test_train_eval_pipeline(workspace, capsys):
    root = workspace
    cfg = ["--config", str(root / "small.json")]
    assert main(["train-stage1", "--data", str(root / "data"), "--out", str(root / "ckpt"), *cfg]) == EXIT_OK
    assert "InfoNCE" in capsys.readouterr().out
    manifest = json.loads((root / "ckpt" / "manifest.json").read_text())
    assert manifest["categories"]["dome"]["stage"] == 1
    # eval needs a stage-2 model
    assert main(["eval", "--ckpt", str(root / "ckpt"), "--data", str(root / "data"), "--out", str(root / "ev")]) \
        == EXIT_CONFIG
    assert main(["train-stage2", "--ckpt", str(root / "ckpt"), "--data", str(root / "data"),
                 "--out", str(root / "ckpt2")]) == EXIT_OK
    assert main(["eval", "--ckpt", str(root / "ckpt2"), "--data", str(root / "data"), "--out", str(root / "ev")]) \
        == EXIT_OK
    with open(root / "ev" / "scores.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and set(rows[0]) == {"id", "category", "label", "pattern", "sco_a"}
    seg = read_tensor(root / "ev" / "seg" / f"{int(rows[0]['id']):06d}.miid")
    assert seg.shape == (8, 8)
    summary = json.loads((root / "ev" / "summary.json").read_text())
    assert set(summary["categories"]["dome"]) >= {"p_auroc", "aupro", "i_auroc"}
    assert main(["train-stage2", "--ckpt", str(root / "ckpt"), "--data", str(root / "data"),
                 "--out", str(root / "ckpt3"), "--no-rphd"]) == EXIT_OK
    manifest = json.loads((root / "ckpt3" / "manifest.json").read_text())
    assert manifest["experiment"]["model"]["use_rphd"] is False


def test_bench_and_config(workspace, capsys):
    root = workspace
    assert main(["bench", "--config", str(root / "small.json"), "--rates", "0.5", "--out", str(root / "bench")]) \
        == EXIT_OK
    assert (root / "bench" / "bench.csv").exists() and (root / "bench" / "manifest.json").exists()
    capsys.readouterr()
    assert main(["config", "--instr-len", "4", "--no-rphd"]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["model"]["fusion"]["instr_len"] == 4 and printed["model"]["use_rphd"] is False


def test_exit_codes(workspace, tmp_path, monkeypatch):
    root = workspace
    assert main(["config", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text('{"missing": {"rate": 2}}')
    assert main(["config", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    assert main(["synth", "--categories", "cube", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["missing", "--mode", "depth", str(root / "raw"), str(tmp_path / "y")]) == EXIT_CONFIG
    assert main(["bench", "--rates", "1.5", "--out", str(tmp_path / "b")]) == EXIT_CONFIG
    # a data directory without an index is a runtime failure
    assert main(["missing", str(tmp_path / "nowhere"), str(tmp_path / "z")]) == EXIT_RUNTIME
    monkeypatch.setenv("MIIAD_NUM_THREADS", "zero")
    assert main(["config"]) == EXIT_CONFIG


def test_thread_override(monkeypatch, capsys):
    before = torch.get_num_threads()
    monkeypatch.setenv("MIIAD_NUM_THREADS", "1")
    try:
        assert main(["config"]) == EXIT_OK
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)


def test_usage_errors_exit_nonzero():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
