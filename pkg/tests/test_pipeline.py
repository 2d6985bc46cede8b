import dataclasses
import json

import numpy as np
import pytest
from conftest import small_radar_config

from miiad.checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from miiad.pipeline import Radar


@pytest.fixture(scope="module")
def fitted(tiny_missing):
    model = Radar(small_radar_config())
    report = model.fit(tiny_missing.train)
    return model, report


def test_fit_report(fitted, tiny_missing):
    model, report = fitted
    assert report.train_image_scores.shape == (len(tiny_missing.train), 3)
    n_pc = sum(s.mask.has_pc for s in tiny_missing.train)
    tokens = model.grid[0] * model.grid[1]
    assert report.repository_sizes == {"pc": n_pc * tokens, "rgb": len(tiny_missing.train) * tokens,
                                       "fs": len(tiny_missing.train) * tokens}
    assert 0 < report.trainable_ratio < 1
    assert len(report.stage1.epoch_losses) == 2 and report.stage2 is not None


def test_repositories_hold_no_pseudo_pc(fitted, tiny_missing):
    model, _ = fitted
    missing = {s.id for s in tiny_missing.train if not s.mask.has_pc}
    assert missing
    assert not set(model.repos["pc"].sample_ids.tolist()) & missing
    assert not model.repos["pc"].pseudo.any()


def test_predict_shapes_and_determinism(fitted, tiny_missing):
    model, _ = fitted
    a = model.predict(tiny_missing.test)
    b = model.predict(tiny_missing.test)
    for s, r, q in zip(tiny_missing.test, a, b):
        assert r.seg_pixels.shape == s.shape and r.seg_m.shape == model.grid
        assert np.isfinite(r.sco_a) and np.isfinite(r.seg_m).all()
        assert r.sco_a == q.sco_a and np.array_equal(r.seg_m, q.seg_m)


def test_unfitted_model_raises(tiny_dataset):
    with pytest.raises(RuntimeError):
        Radar(small_radar_config()).predict(tiny_dataset.test)


def test_no_rphd_changes_features_only(tiny_missing):
    on = Radar(small_radar_config())
    off = Radar(small_radar_config(use_rphd=False), on.extractor)
    on.fit(tiny_missing.train)
    off.fit(tiny_missing.train)
    assert off.hybrid is None and off.parameter_counts()["hybrid_layer"] == 0
    r_on, r_off = on.predict(tiny_missing.test), off.predict(tiny_missing.test)
    assert not np.allclose([r.sco_a for r in r_on], [r.sco_a for r in r_off])
    assert all(np.isfinite(r.seg_m).all() for r in r_off)
    # identical stage-1 training, so the feature difference comes from the hybrid layer alone
    np.testing.assert_array_equal(on.stage1.instructions.tokens.detach(), off.stage1.instructions.tokens.detach())


def test_no_aif_has_no_trainable_parameters(tiny_dataset):
    counts = Radar(small_radar_config(use_aif=False)).parameter_counts()
    assert counts["trainable"] == 0


def test_checkpoint_roundtrip(fitted, tiny_missing, tmp_path):
    model, _ = fitted
    path = save_checkpoint({"dome": model}, tmp_path / "ckpt", extra={"note": 1})
    manifest = read_manifest(path)
    assert manifest["note"] == 1 and manifest["categories"]["dome"]["stage"] == 2
    loaded, _ = load_checkpoint(path, model.cfg)
    back = loaded["dome"]
    for r, q in zip(model.predict(tiny_missing.test), back.predict(tiny_missing.test)):
        assert r.sco_a == pytest.approx(q.sco_a, rel=1e-9)
        np.testing.assert_allclose(q.seg_m, r.seg_m, rtol=1e-9, atol=1e-12)


def test_stage1_only_checkpoint(tiny_dataset, tmp_path):
    model = Radar(small_radar_config())
    model.fit_stage1(tiny_dataset.train)
    path = save_checkpoint({"dome": model}, tmp_path / "s1")
    back = load_checkpoint(path)[0]["dome"]
    assert back.repos is None and back.decision is None
    np.testing.assert_array_equal(back.stage1.instructions.tokens.detach(), model.stage1.instructions.tokens.detach())
    back.fit_stage2(tiny_dataset.train)
    assert back.decision is not None


def test_checkpoint_errors(fitted, tmp_path):
    model, _ = fitted
    path = save_checkpoint({"dome": model}, tmp_path / "ckpt")
    other = dataclasses.replace(model.cfg, backbone_seed=7)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)
    mf = json.loads((path / "manifest.json").read_text())
    mf["categories"]["dome"]["frozen_fingerprint"] += 1.0
    (path / "manifest.json").write_text(json.dumps(mf))
    with pytest.raises(CheckpointError, match="frozen"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "nowhere")
    with pytest.raises(CheckpointError):
        save_checkpoint({}, tmp_path / "empty")


def test_feature_cache_is_keyed_by_content():
    from miiad.data import preprocess, synth_anomaly, synth_normal
    from miiad.pipeline import FeatureExtractor

    base = preprocess(synth_normal("disk", 32, seed=4, id=9))
    anom = preprocess(synth_anomaly(base, "color_blotch", seed=1))
    assert anom.id == base.id
    ex = FeatureExtractor(small_radar_config())
    f_base, f_anom = ex.rgb_features(base), ex.rgb_features(anom)
    assert not np.array_equal(f_base, f_anom)
    assert ex.rgb_features(base) is f_base
