import dataclasses
import json

import numpy as np
import pytest
from conftest import small_radar_config

from miiad.config import DataConfig, ExperimentConfig, MissingConfig
from miiad.harness import (
    ABLATION_FLAGS,
    FeatureCache,
    ResultTable,
    combine,
    emit_report,
    run_ablation,
    run_experiment,
    run_rates,
    variant_name,
)


def _same_rows(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_equal(dataclasses.astuple(x), dataclasses.astuple(y))


def _cfg(**kw) -> ExperimentConfig:
    return ExperimentConfig(data=DataConfig(categories=("dome", "disk"), n_train=8, n_test=6, seed=3),
                            missing=MissingConfig("pc", 0.5, 1), model=small_radar_config(), **kw)


@pytest.fixture(scope="module")
def cache():
    return FeatureCache()


@pytest.fixture(scope="module")
def ablation(cache):
    return run_ablation(_cfg(), cache)


def test_variant_names():
    names = {variant_name(*f) for f in ABLATION_FLAGS}
    assert len(names) == 8
    assert variant_name(False, False, False) == "baseline"
    assert variant_name(True, True, True) == "radar"
    assert variant_name(False, True, False) == "+A"


def test_ablation_rows(ablation):
    table = combine(ablation)
    assert len(table.groups()) == 8
    assert len(table) == 8 * 3
    assert table.check_means()
    for g in table.groups():
        row = table.get(*g)
        assert 0 <= row.p_auroc <= 1 and 0 <= row.aupro <= 1 and 0 <= row.i_auroc <= 1


def test_report_files_agree(ablation, tmp_path):
    paths = emit_report(ablation, tmp_path, "ablation")
    table = ResultTable.from_csv(paths["csv"])
    _same_rows(table.rows, combine(ablation).rows)
    md = paths["markdown"].read_text()
    assert md.count("\n") == 2 + len(table)
    for r in table.rows:
        assert f"{r.p_auroc:.4f}" in md
    mf = json.loads(paths["manifest"].read_text())
    assert len(mf["runs"]) == 8
    for run, res in zip(mf["runs"], ablation):
        assert run["config_hash"] == res.config.digest()
        assert run["trainable_ratio"] == pytest.approx(run["parameter_counts"]["trainable"]
                                                       / run["parameter_counts"]["total"])
    with pytest.raises(ValueError):
        emit_report([], tmp_path)


def test_runs_are_deterministic(cache):
    a = run_experiment(_cfg(), cache)
    b = run_experiment(_cfg(), FeatureCache())
    _same_rows(a.table.rows, b.table.rows)


def test_seeds_and_std(cache):
    res = run_experiment(_cfg(n_seeds=2), cache)
    assert [r.seed_offset for r in res.runs] == [0, 1]
    assert res.runs[1].config.data.seed == res.runs[0].config.data.seed + 1
    mean = res.table.get("radar", "pc", 0.5)
    assert mean.n_seeds == 2 and np.isfinite(mean.p_auroc_std)
    assert res.table.check_means()


def test_rate_sweep(cache):
    results = run_rates(_cfg(), [0.0, 0.3], cache)
    assert [r.config.missing.rate for r in results] == [0.0, 0.3]
    # every training point cloud missing leaves R_pc empty
    with pytest.raises(ValueError, match="R_pc"):
        run_rates(_cfg(), [1.0], cache)
