"""Acceptance gate: one test per criterion, each logging a PASS/FAIL line.

The directional criteria (5, 6, 7, 9) share one set of runs on the default
synthetic benchmark, built once per session by the ``bench`` fixture.
"""

import math
import time
import warnings

import numpy as np
import pytest
import torch
from conftest import record_verdict
from oracles import aupro_bruteforce, auroc_pairwise
from scipy.ndimage import binary_dilation

from miiad.config import ExperimentConfig
from miiad.data import (
    ANOMALY_KINDS,
    CATEGORIES,
    GroundTruth,
    MiiadDataset,
    MissingSpec,
    ModalityMask,
    apply_missing,
    fill_pseudo,
    missing_counts,
    preprocess,
    synth_anomaly,
    synth_normal,
)
from miiad.fusion import HyperNetwork, TargetLayer, apply_generated_mlp, unpack_weights
from miiad.harness import FeatureCache, manifest, run_experiment, with_flags, with_rate
from miiad.hybrid import masked_attention_weights
from miiad.metrics import aupro, auroc, pixel_auroc
from miiad.pipeline import Radar
from miiad.point_encoder import interpolate_features, interpolation_weights

pytestmark = pytest.mark.slow

RATES = (0.3, 0.5, 0.7)


# 1 ------------------------------------------------------------------------

def test_c01_metric_oracles():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {"auroc": 0.0, "pixel_auroc": 0.0, "aupro": 0.0}
    for i in range(200):
        n = int(rng.integers(2, 65))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.normal(size=n)
        if i % 3 == 0:
            scores = np.round(scores, 1)  # exercise ties
        worst["auroc"] = max(worst["auroc"], abs(auroc(scores, labels) - auroc_pairwise(scores, labels)))

        k = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(2, 9, 2))
        maps = [rng.random((h, w)) for _ in range(k)]
        if i % 3 == 0:
            maps = [np.round(m, 1) for m in maps]
        gts = [rng.random((h, w)) < 0.3 for _ in range(k)]
        gts[0][0, 0], gts[-1][-1, -1] = True, False
        flat_s = np.concatenate([m.ravel() for m in maps])
        flat_y = np.concatenate([g.ravel() for g in gts]).astype(int)
        worst["pixel_auroc"] = max(worst["pixel_auroc"], abs(pixel_auroc(maps, gts) - auroc_pairwise(flat_s, flat_y)))
        worst["aupro"] = max(worst["aupro"], abs(aupro(maps, gts) - aupro_bruteforce(maps, gts)))
    elapsed = time.perf_counter() - t0
    ok = worst["auroc"] <= 1e-9 and worst["pixel_auroc"] <= 1e-9 and worst["aupro"] <= 1e-6 and elapsed < 30
    detail = ", ".join(f"{k} max err {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    assert record_verdict(1, "metric oracle equivalence", ok, detail)


# 2 ------------------------------------------------------------------------

def test_c02_masked_attention_properties():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    sum_err = shift_err = 0.0
    masked_zero = True
    for _ in range(1000):
        length, d = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        q = torch.as_tensor(rng.normal(size=(length, d)))
        k = torch.as_tensor(rng.normal(size=(length, d)))
        mask = torch.as_tensor(rng.random((length, length)) < rng.random())
        mask[torch.arange(length), torch.as_tensor(rng.integers(0, length, length))] = True
        w = masked_attention_weights(q, k, mask)
        sum_err = max(sum_err, float((w.sum(-1) - 1).abs().max()))
        masked_zero &= bool(torch.all(w[~mask] == 0))
        # adding c to every key adds the row constant q_i . c to every logit of row i
        c = torch.as_tensor(rng.normal(size=d)) * 3
        shift_err = max(shift_err, float((masked_attention_weights(q, k + c, mask) - w).abs().max()))
    elapsed = time.perf_counter() - t0
    ok = sum_err <= 1e-12 and masked_zero and shift_err <= 1e-12 and elapsed < 5
    detail = (f"row-sum err {sum_err:.1e}, masked entries exactly 0: {masked_zero}, "
              f"shift err {shift_err:.1e}; {elapsed:.2f}s")
    assert record_verdict(2, "masked attention properties", ok, detail)


# 3 ------------------------------------------------------------------------

def test_c03_interpolation_properties():
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    sum_err = hull_excess = 0.0
    for i in range(500):
        n, m, c = int(rng.integers(1, 40)), int(rng.integers(1, 17)), int(rng.integers(1, 6))
        pts, centers = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        feats = rng.normal(size=(m, c)) * rng.random() * 10
        eps = 10.0 ** rng.uniform(-10, 0)
        neighbors = (0, 3)[i % 2]
        w = interpolation_weights(pts, centers, eps, neighbors=neighbors)
        sum_err = max(sum_err, float(np.abs(w.sum(1) - 1).max()))
        out = interpolate_features(pts, centers, feats, eps, neighbors=neighbors)
        lo, hi = feats.min(0), feats.max(0)
        hull_excess = max(hull_excess, float(np.max(lo - out)), float(np.max(out - hi)))
    elapsed = time.perf_counter() - t0
    tol = 1e-12
    ok = sum_err <= tol and hull_excess <= tol and elapsed < 5
    detail = f"weight-sum err {sum_err:.1e}, hull excess {max(hull_excess, 0.0):.1e}; {elapsed:.2f}s"
    assert record_verdict(3, "interpolation properties", ok, detail)


# 4 ------------------------------------------------------------------------

def test_c04_hypernetwork_gradient_check():
    t0 = time.perf_counter()
    torch.manual_seed(404)
    dim = 6
    targets = [TargetLayer("fc1", dim, dim), TargetLayer("fc2", dim, dim)]
    hn = HyperNetwork(targets, stream_dim=dim, z_dim=dim, xi_hidden=dim, embed_dim=dim, hyper_hidden=dim).double()
    torch.nn.init.normal_(hn.head2.weight, std=0.3)  # off the zero init, so every path carries gradient
    torch.nn.init.normal_(hn.head2.bias, std=0.3)
    summary = torch.randn(2, dim, dtype=torch.float64)
    x = torch.randn(2, 5, dim, dtype=torch.float64)
    y = torch.randn(2, 5, dim, dtype=torch.float64)

    def loss() -> torch.Tensor:
        flat = hn([summary, summary])
        layers = [unpack_weights(f, t.n_in, t.n_out) for f, t in zip(flat, targets)]
        return ((apply_generated_mlp(layers, x) - y) ** 2).mean()

    groups = {"z": [hn.z], "theta_p": list(hn.xi.parameters()), "W1": [hn.head1.weight], "B1": [hn.head1.bias],
              "W2": [hn.head2.weight], "B2": [hn.head2.bias]}
    hn.zero_grad()
    loss().backward()
    h = 1e-5
    errors = {}
    with torch.no_grad():
        for name, params in groups.items():
            analytic, numeric = [], []
            for p in params:
                flat = p.view(-1)
                for j in range(flat.numel()):
                    orig = flat[j].item()
                    flat[j] = orig + h
                    up = loss().item()
                    flat[j] = orig - h
                    down = loss().item()
                    flat[j] = orig
                    numeric.append((up - down) / (2 * h))
                analytic.append(p.grad.view(-1))
            a = torch.cat(analytic).numpy()
            n = np.asarray(numeric)
            errors[name] = float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-300))
    elapsed = time.perf_counter() - t0
    ok = all(e <= 1e-4 for e in errors.values()) and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {elapsed:.1f}s"
    assert record_verdict(4, "hypernetwork gradient check", ok, detail)


# shared benchmark runs (criteria 5, 6, 7, 9) -------------------------------

@pytest.fixture(scope="module")
def bench():
    cfg = ExperimentConfig(n_seeds=3)
    cache = FeatureCache()
    t0 = time.process_time()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        runs = {
            "baseline": run_experiment(with_flags(with_rate(cfg, 0.7), False, False, False), cache),
            "+A": run_experiment(with_flags(with_rate(cfg, 0.7), False, True, False), cache),
        }
        for rate in RATES:
            runs[f"radar@{rate}"] = run_experiment(with_rate(cfg, rate), cache, keep_models=rate == 0.7)
    return runs, (time.process_time() - t0) / 60


def _mean_row(result):
    return result.table.get(result.table.rows[-1].variant, result.config.missing.mode, result.config.missing.rate)


def test_c05_directional_ablation(bench):
    runs, cpu_minutes = bench
    base = _mean_row(runs["baseline"]).p_auroc
    aif = _mean_row(runs["+A"]).p_auroc
    full = _mean_row(runs["radar@0.7"]).p_auroc
    ok = full >= base + 0.01 and aif >= base and cpu_minutes < 30
    detail = (f"P-AUROC baseline {base:.4f}, +AIF {aif:.4f}, full {full:.4f} "
              f"(need full >= {base + 0.01:.4f} and +AIF >= {base:.4f}); {cpu_minutes:.1f} CPU-min for all runs")
    assert record_verdict(5, "directional ablation at 70% pc-missing", ok, detail)


def test_c06_missing_rate_degradation(bench):
    runs, _ = bench
    rows = [_mean_row(runs[f"radar@{r}"]) for r in RATES]
    pooled = math.sqrt(np.mean([r.p_auroc_std ** 2 for r in rows]))
    means = [r.p_auroc for r in rows]
    ok = all(b <= a + pooled for a, b in zip(means, means[1:]))
    detail = ", ".join(f"{r:g}: {m:.4f}" for r, m in zip(RATES, means)) + f" (pooled std {pooled:.4f})"
    assert record_verdict(6, "P-AUROC nonincreasing in missing rate", ok, detail)


def test_c07_parameter_efficiency(bench):
    runs, _ = bench
    mf = manifest([runs["radar@0.7"]])["runs"][0]
    counts = mf["parameter_counts"]
    exact = mf["trainable_ratio"] == counts["trainable"] / counts["total"]
    ok = exact and mf["trainable_ratio"] < 0.10
    detail = f"trainable {counts['trainable']} / total {counts['total']} = {mf['trainable_ratio']:.4f} in manifest"
    assert record_verdict(7, "trainable parameter ratio", ok, detail)


# 8 ------------------------------------------------------------------------

def _stub_dataset(n: int) -> MiiadDataset:
    base = synth_normal("dome", 8, 0)
    samples = tuple(
        type(base)(base.rgb, base.pc, GroundTruth(np.zeros((8, 8), bool)), ModalityMask(), "dome", i)
        for i in range(n))
    return MiiadDataset(samples, samples, ("dome",))


def test_c08_missing_protocol():
    t0 = time.perf_counter()
    failures = []
    for n in (10, 100, 2656):
        ds = _stub_dataset(n)
        for rate in (0.0, 0.3, 0.5, 0.7, 1.0):
            total = math.floor(rate * n + 0.5)
            for mode in ("pc", "rgb", "both"):
                spec = MissingSpec(mode, rate, 7)
                out = apply_missing(ds, spec)
                for split in (out.train, out.test):
                    rgb_only = sum(s.mask.pattern == "rgb_only" for s in split)
                    pc_only = sum(s.mask.pattern == "pc_only" for s in split)
                    want = {"pc": (total, 0), "rgb": (0, total), "both": (total - total // 2, total // 2)}[mode]
                    if (rgb_only, pc_only) != want or missing_counts(n, spec) != want:
                        failures.append((n, rate, mode))
                again = apply_missing(ds, spec)
                if [s.mask for s in again.train] != [s.mask for s in out.train]:
                    failures.append((n, rate, mode, "nondeterministic"))
    s = apply_missing(_stub_dataset(4), MissingSpec("both", 1.0, 0))
    filled = [fill_pseudo(x) for x in s.train]
    pseudo_ok = all(
        (x.rgb.shape == (8, 8, 3) and (x.rgb == 1).all() if not m.mask.has_rgb else x.rgb is m.rgb)
        and (x.pc.coords.shape == (8, 8, 3) and (x.pc.coords == 1).all() if not m.mask.has_pc else x.pc is m.pc)
        for x, m in zip(filled, s.train))
    elapsed = time.perf_counter() - t0
    ok = not failures and pseudo_ok and elapsed < 5
    detail = f"{len(failures)} count mismatches over 45 (n, rate, mode) cases, all-ones fill ok: {pseudo_ok}; {elapsed:.2f}s"
    assert record_verdict(8, "missing-modality protocol", ok, detail)


# 9 ------------------------------------------------------------------------

def test_c09_end_to_end_pairs(bench):
    runs, _ = bench
    t0 = time.perf_counter()
    models: dict[str, Radar] = {c: run.model for c, run in runs["radar@0.7"].runs[0].categories.items()}
    higher = inside = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i in range(20):
            cat = CATEGORIES[i % len(CATEGORIES)]
            base = preprocess(synth_normal(cat, 32, seed=9000 + i, id=50_000 + i))
            anom = preprocess(synth_anomaly(base, ANOMALY_KINDS[i % len(ANOMALY_KINDS)], seed=i))
            model = models[cat]
            r_base, r_anom = model.predict([base, anom])
            higher += r_anom.sco_a > r_base.sco_a
            p = model.cfg.patch
            gt = anom.gt.anomaly_mask.reshape(model.grid[0], p, model.grid[1], p).any(axis=(1, 3))
            dilated = binary_dilation(gt, structure=np.ones((3, 3), bool))
            inside += bool(dilated.flat[int(np.argmax(r_anom.seg_m))])
    elapsed = time.perf_counter() - t0
    ok = higher >= 16 and inside >= 14 and elapsed < 300
    detail = f"sco_a higher in {higher}/20 (need 16), seg argmax in dilated GT {inside}/20 (need 14); {elapsed:.1f}s"
    assert record_verdict(9, "end-to-end anomaly pairs", ok, detail)


# 10 -----------------------------------------------------------------------

def test_c10_infonce_training_signal():
    cfg = ExperimentConfig()
    cfg.model.fusion.epochs = 5
    t0 = time.perf_counter()
    cache = FeatureCache()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = apply_missing(cache.dataset(cfg), MissingSpec(cfg.missing.mode, cfg.missing.rate, cfg.missing.seed))
    parts = []
    ok = True
    for cat in cfg.data.categories:
        hist = Radar(cfg.model, cache.extractor(cfg, cat)).fit_stage1(list(ds.by_category(cat).train))
        decreased = hist.final_loss < hist.initial_loss
        nonzero = len(hist.instr_grad_norms) > 0 and all(g > 0 for g in hist.instr_grad_norms)
        ok &= decreased and nonzero
        parts.append(f"{cat} {hist.initial_loss:.3f}->{hist.final_loss:.3f} "
                     f"({sum(g > 0 for g in hist.instr_grad_norms)}/{len(hist.instr_grad_norms)} batches with grad)")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 300
    assert record_verdict(10, "InfoNCE training signal", ok, "; ".join(parts) + f"; {elapsed:.0f}s")
