"""Experiment driver: data, two-stage training per category, metrics, reports."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import MiiadDataset, MissingSpec, apply_missing, make_dataset, preprocess_dataset
from .hybrid import AnomalyResult
from .metrics import aupro, auroc, pixel_auroc
from .pipeline import FeatureExtractor, FitReport, Radar

log = logging.getLogger(__name__)

METRICS = ("p_auroc", "aupro", "i_auroc")
MEAN = "mean"


def variant_name(use_fe: bool, use_aif: bool, use_rphd: bool) -> str:
    if use_fe and use_aif and use_rphd:
        return "radar"
    parts = [tag for tag, on in (("F", use_fe), ("A", use_aif), ("R", use_rphd)) if on]
    return "baseline" if not parts else "+" + "+".join(parts)


@dataclass
class ResultRow:
    variant: str
    mode: str
    rate: float
    category: str
    p_auroc: float
    aupro: float
    i_auroc: float
    p_auroc_std: float = math.nan
    aupro_std: float = math.nan
    i_auroc_std: float = math.nan
    n_seeds: int = 1

    @property
    def key(self) -> tuple[str, str, float, str]:
        return (self.variant, self.mode, self.rate, self.category)


@dataclass
class ResultTable:
    """Category rows plus one mean row per (variant, mode, rate)."""

    rows: list[ResultRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def extend(self, other: "ResultTable") -> "ResultTable":
        self.rows.extend(other.rows)
        return self

    def get(self, variant: str, mode: str, rate: float, category: str = MEAN) -> ResultRow:
        for r in self.rows:
            if r.key == (variant, mode, rate, category):
                return r
        raise KeyError((variant, mode, rate, category))

    def groups(self) -> list[tuple[str, str, float]]:
        seen = []
        for r in self.rows:
            if r.key[:3] not in seen:
                seen.append(r.key[:3])
        return seen

    def category_rows(self, variant: str, mode: str, rate: float) -> list[ResultRow]:
        return [r for r in self.rows if r.key[:3] == (variant, mode, rate) and r.category != MEAN]

    def check_means(self, tol: float = 1e-12) -> bool:
        """Every mean row equals the arithmetic mean of its category rows."""
        for g in self.groups():
            cats = self.category_rows(*g)
            mean = self.get(*g)
            for m in METRICS:
                if abs(np.mean([getattr(r, m) for r in cats]) - getattr(mean, m)) > tol:
                    return False
        return True

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        names = [f.name for f in dataclasses.fields(ResultRow)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "ResultTable":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                kw = {}
                for f in dataclasses.fields(ResultRow):
                    v = rec[f.name]
                    kw[f.name] = int(v) if f.type in ("int", int) else float(v) if f.type in ("float", float) else v
                rows.append(ResultRow(**kw))
        return cls(rows)

    def to_markdown(self) -> str:
        lines = ["| variant | mode | rate | category | P-AUROC | AUPRO | I-AUROC |",
                 "|---|---|---|---|---|---|---|"]
        for r in self.rows:
            cells = []
            for m in METRICS:
                v, s = getattr(r, m), getattr(r, f"{m}_std")
                cells.append(f"{v:.4f}" if math.isnan(s) else f"{v:.4f} ± {s:.4f}")
            lines.append(f"| {r.variant} | {r.mode} | {r.rate:g} | {r.category} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


@dataclass
class CategoryRun:
    category: str
    model: Radar | None
    report: FitReport
    results: list[AnomalyResult]
    metrics: dict[str, float]


@dataclass
class SeedRun:
    seed_offset: int
    config: ExperimentConfig
    categories: dict[str, CategoryRun]
    wall_time: float


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    table: ResultTable
    runs: list[SeedRun]
    wall_time: float

    @property
    def parameter_counts(self) -> dict[str, int]:
        first = next(iter(self.runs[0].categories.values()))
        return first.report.parameter_counts


class FeatureCache:
    """Shares preprocessed datasets and encoder outputs between runs.

    Encoder features of a sample depend only on the data config, the
    encoder config and the FE flag, not on the missing spec or the trained
    stages, so ablations and rate sweeps reuse them.
    """

    def __init__(self):
        self._data: dict[str, MiiadDataset] = {}
        self._extractors: dict[str, FeatureExtractor] = {}

    def dataset(self, cfg: ExperimentConfig) -> MiiadDataset:
        key = json.dumps(dataclasses.asdict(cfg.data), sort_keys=True)
        if key not in self._data:
            d = cfg.data
            raw = make_dataset(d.categories, n_train=d.n_train, n_test=d.n_test, size=d.size, seed=d.seed,
                               anomaly_fraction=d.anomaly_fraction)
            self._data[key] = preprocess_dataset(raw, threshold=d.ransac_threshold, iterations=d.ransac_iterations)
        return self._data[key]

    def extractor(self, cfg: ExperimentConfig, category: str) -> FeatureExtractor:
        m = cfg.model
        key = json.dumps([dataclasses.asdict(cfg.data), category, m.patch, m.image_size, m.backbone_seed, m.use_fe,
                          dataclasses.asdict(m.point), dataclasses.asdict(m.rgb)], sort_keys=True)
        if key not in self._extractors:
            self._extractors[key] = FeatureExtractor(m)
        return self._extractors[key]


def missing_spec(cfg: ExperimentConfig) -> MissingSpec:
    return MissingSpec(cfg.missing.mode, cfg.missing.rate, cfg.missing.seed)


def evaluate(results: list[AnomalyResult], samples, fpr_limit: float = 0.3, connectivity: int = 8) -> dict[str, float]:
    maps = [r.seg_pixels for r in results]
    gts = [s.gt.anomaly_mask for s in samples]
    labels = [s.label for s in samples]
    return {
        "p_auroc": pixel_auroc(maps, gts),
        "aupro": aupro(maps, gts, fpr_limit, connectivity),
        "i_auroc": auroc([r.sco_a for r in results], labels),
    }


def run_seed(cfg: ExperimentConfig, cache: FeatureCache | None = None, keep_models: bool = False,
             seed_offset: int = 0) -> SeedRun:
    """One pass over every category with the seeds in ``cfg`` (already offset)."""
    cache = cache or FeatureCache()
    t0 = time.perf_counter()
    ds = apply_missing(cache.dataset(cfg), missing_spec(cfg))
    runs = {}
    for cat in cfg.data.categories:
        part = ds.by_category(cat)
        model = Radar(cfg.model, cache.extractor(cfg, cat))
        report = model.fit(list(part.train))
        results = model.predict(list(part.test))
        metrics = evaluate(results, part.test, cfg.metrics.fpr_limit, cfg.metrics.connectivity)
        log.info("%s %s rate=%.2f %s: %s", variant_name(cfg.model.use_fe, cfg.model.use_aif, cfg.model.use_rphd),
                 cfg.missing.mode, cfg.missing.rate, cat, {k: round(v, 4) for k, v in metrics.items()})
        runs[cat] = CategoryRun(cat, model if keep_models else None, report, results, metrics)
    return SeedRun(seed_offset, cfg, runs, time.perf_counter() - t0)


def aggregate(cfg: ExperimentConfig, runs: list[SeedRun]) -> ResultTable:
    variant = variant_name(cfg.model.use_fe, cfg.model.use_aif, cfg.model.use_rphd)
    mode, rate = cfg.missing.mode, cfg.missing.rate
    rows = []
    per_seed_means = {m: [] for m in METRICS}
    for run in runs:
        for m in METRICS:
            per_seed_means[m].append(np.mean([run.categories[c].metrics[m] for c in cfg.data.categories]))

    def std(values):
        return float(np.std(values, ddof=1)) if len(values) > 1 else math.nan

    for cat in cfg.data.categories:
        vals = {m: [run.categories[cat].metrics[m] for run in runs] for m in METRICS}
        rows.append(ResultRow(variant, mode, rate, cat, *(float(np.mean(vals[m])) for m in METRICS),
                              *(std(vals[m]) for m in METRICS), n_seeds=len(runs)))
    cat_rows = rows[:]
    rows.append(ResultRow(variant, mode, rate, MEAN,
                          *(float(np.mean([getattr(r, m) for r in cat_rows])) for m in METRICS),
                          *(std(per_seed_means[m]) for m in METRICS), n_seeds=len(runs)))
    return ResultTable(rows)


def run_experiment(cfg: ExperimentConfig, cache: FeatureCache | None = None,
                   keep_models: bool = False) -> ExperimentResult:
    """Train and evaluate ``cfg.n_seeds`` times with incremented seeds."""
    cache = cache or FeatureCache()
    t0 = time.perf_counter()
    runs = [run_seed(cfg.with_seed_offset(k), cache, keep_models, k) for k in range(cfg.n_seeds)]
    return ExperimentResult(cfg, aggregate(cfg, runs), runs, time.perf_counter() - t0)


def with_flags(cfg: ExperimentConfig, use_fe: bool, use_aif: bool, use_rphd: bool) -> ExperimentConfig:
    out = ExperimentConfig.from_dict(cfg.to_dict())
    out.model.use_fe, out.model.use_aif, out.model.use_rphd = use_fe, use_aif, use_rphd
    return out


def with_rate(cfg: ExperimentConfig, rate: float, mode: str | None = None) -> ExperimentConfig:
    out = ExperimentConfig.from_dict(cfg.to_dict())
    out.missing.rate = rate
    if mode is not None:
        out.missing.mode = mode
    return out


ABLATION_FLAGS = list(itertools.product((False, True), repeat=3))


def run_ablation(cfg: ExperimentConfig, cache: FeatureCache | None = None,
                 flags: list[tuple[bool, bool, bool]] | None = None,
                 keep_models: bool = False) -> list[ExperimentResult]:
    """All (FE, AIF, RPHD) combinations on shared data and seeds."""
    cache = cache or FeatureCache()
    return [run_experiment(with_flags(cfg, *f), cache, keep_models) for f in (flags or ABLATION_FLAGS)]


def run_rates(cfg: ExperimentConfig, rates: list[float], cache: FeatureCache | None = None,
              keep_models: bool = False) -> list[ExperimentResult]:
    cache = cache or FeatureCache()
    return [run_experiment(with_rate(cfg, r), cache, keep_models) for r in rates]


def combine(results: list[ExperimentResult]) -> ResultTable:
    table = ResultTable()
    for r in results:
        table.extend(r.table)
    return table


def manifest(results: list[ExperimentResult]) -> dict:
    runs = []
    for r in results:
        counts = r.parameter_counts
        runs.append({
            "name": r.config.name,
            "config_hash": r.config.digest(),
            "config": r.config.to_dict(),
            "seeds": [{"data": s.config.data.seed, "missing": s.config.missing.seed,
                       "stage1": s.config.model.fusion.seed, "stage2": s.config.model.hybrid.seed,
                       "backbone": s.config.model.backbone_seed} for s in r.runs],
            "wall_time_s": r.wall_time,
            "parameter_counts": counts,
            "trainable_ratio": counts["trainable"] / counts["total"],
        })
    return {"runs": runs, "total_wall_time_s": float(sum(r.wall_time for r in results))}


def emit_report(results: list[ExperimentResult], path: str | Path, stem: str = "results") -> dict[str, Path]:
    """Write ``<stem>.csv``, ``<stem>.md`` and ``manifest.json`` into ``path``."""
    if not results:
        raise ValueError("nothing to report")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = combine(results)
    out = {"csv": table.to_csv(path / f"{stem}.csv"), "markdown": path / f"{stem}.md",
           "manifest": path / "manifest.json"}
    out["markdown"].write_text(table.to_markdown())
    out["manifest"].write_text(json.dumps(manifest(results), indent=1))
    return out
