"""Command-line entry point: ``miiad <subcommand> ...``.

Exit codes: 0 on success, 2 on a configuration error (bad config file,
invalid option values, checkpoint/config mismatch), 3 on any other failure.
The ``MIIAD_NUM_THREADS`` environment variable caps torch's thread pool.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import CATEGORIES, MiiadDataset, MissingSpec, apply_missing, make_dataset, preprocess_dataset
from .harness import FeatureCache, emit_report, evaluate, run_ablation, run_rates
from .io import DTYPE_F32, load_dataset, save_dataset, write_tensor
from .pipeline import Radar

log = logging.getLogger("miiad")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(ConfigError):
    def __init__(self, path: str, message: str):
        super().__init__([(path, message)])


# ---------------------------------------------------------------------------
# config assembly


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _int_pair(text: str) -> tuple[int, int]:
    parts = _csv_list(text)
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected START,END")
    return int(parts[0]), int(parts[1])


def _add_model_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    g.add_argument("--config", type=Path, help="experiment config (JSON); defaults apply when omitted")
    g.add_argument("--instr-len", type=int)
    g.add_argument("--instr-layers", type=_int_pair, metavar="START,END")
    g.add_argument("--keep-instructions", action="store_true", default=None)
    g.add_argument("--interp", choices=("normalized", "literal"))
    g.add_argument("--eta", help="'patchcore' or 'constant:<value>'")
    g.add_argument("--fpr-limit", type=float)
    g.add_argument("--no-fe", action="store_true", help="nearest-center pooling instead of interpolation")
    g.add_argument("--no-aif", action="store_true", help="disable instructions and the hypernetwork")
    g.add_argument("--no-rphd", action="store_true", help="disable the hybrid layer")


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with command-line overrides applied, then validated."""
    path = getattr(args, "config", None)
    if path is not None and not Path(path).is_file():
        raise UsageError("--config", f"no such file: {path}")
    data = ExperimentConfig.load(path).to_dict() if path is not None else ExperimentConfig().to_dict()
    m = data["model"]
    if getattr(args, "instr_len", None) is not None:
        m["fusion"]["instr_len"] = args.instr_len
    if getattr(args, "instr_layers", None) is not None:
        m["fusion"]["instr_layers"] = list(args.instr_layers)
    if getattr(args, "keep_instructions", None):
        m["fusion"]["keep_instructions"] = True
    if getattr(args, "interp", None):
        m["point"]["interp"] = args.interp
    if getattr(args, "eta", None):
        m["hybrid"]["eta"] = args.eta
    if getattr(args, "fpr_limit", None) is not None:
        data["metrics"]["fpr_limit"] = args.fpr_limit
    for flag, key in (("no_fe", "use_fe"), ("no_aif", "use_aif"), ("no_rphd", "use_rphd")):
        if getattr(args, flag, False):
            m[key] = False
    if getattr(args, "seeds", None) is not None:
        data["n_seeds"] = args.seeds
    if getattr(args, "rate", None) is not None:
        data["missing"]["rate"] = args.rate
    if getattr(args, "mode", None) is not None:
        data["missing"]["mode"] = args.mode
    return ExperimentConfig.from_dict(data)


def _load_data(path: Path, cfg: ExperimentConfig) -> MiiadDataset:
    ds = load_dataset(path)
    shapes = {s.shape for s in ds.train + ds.test}
    if shapes != {(cfg.model.image_size, cfg.model.image_size)}:
        raise UsageError("model.image_size", f"dataset grids {sorted(shapes)} do not match "
                                             f"{cfg.model.image_size}x{cfg.model.image_size}")
    return preprocess_dataset(ds, threshold=cfg.data.ransac_threshold, iterations=cfg.data.ransac_iterations)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    cats = tuple(_csv_list(args.categories))
    unknown = [c for c in cats if c not in CATEGORIES]
    if unknown or not cats:
        raise UsageError("--categories", f"unknown categories {unknown}; expected a subset of {CATEGORIES}")
    ds = make_dataset(cats, n_train=args.n_train, n_test=args.n_test, size=args.size, seed=args.seed,
                      anomaly_fraction=args.anomaly_fraction)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test samples to {args.out}")
    return EXIT_OK


def cmd_missing(args: argparse.Namespace) -> int:
    try:
        spec = MissingSpec(args.mode, args.rate, args.seed)
    except ValueError as exc:
        raise UsageError("--mode/--rate", str(exc)) from exc
    ds = apply_missing(load_dataset(args.data), spec)
    save_dataset(ds, args.out)
    n_missing = sum(not s.mask.complete for s in ds.train + ds.test)
    print(f"{spec.mode.value} at rate {spec.rate}: {n_missing} of {len(ds.train) + len(ds.test)} samples "
          f"incomplete; wrote {args.out}")
    return EXIT_OK


def cmd_train_stage1(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    ds = _load_data(args.data, cfg)
    models, losses = {}, {}
    for cat in ds.categories:
        model = Radar(cfg.model)
        hist = model.fit_stage1(list(ds.by_category(cat).train))
        models[cat] = model
        losses[cat] = {"initial": hist.initial_loss, "final": hist.final_loss}
        print(f"{cat}: InfoNCE {hist.initial_loss:.4f} -> {hist.final_loss:.4f}")
    save_checkpoint(models, args.out, {"experiment": cfg.to_dict(), "stage1_losses": losses})
    print(f"stage-1 checkpoint written to {args.out}")
    return EXIT_OK


def _experiment_from_manifest(manifest: dict) -> ExperimentConfig:
    return ExperimentConfig.from_dict(manifest["experiment"])


def cmd_train_stage2(args: argparse.Namespace) -> int:
    models, manifest = load_checkpoint(args.ckpt)
    cfg = _experiment_from_manifest(manifest)
    if args.no_rphd or args.eta:
        data = cfg.to_dict()
        data["model"]["use_rphd"] = data["model"]["use_rphd"] and not args.no_rphd
        if args.eta:
            data["model"]["hybrid"]["eta"] = args.eta
        cfg = ExperimentConfig.from_dict(data)
    ds = _load_data(args.data, cfg)
    missing = [c for c in ds.categories if c not in models]
    if missing:
        raise UsageError("--data", f"categories {missing} have no stage-1 model in {args.ckpt}")
    fitted = {}
    for cat in ds.categories:
        old = models[cat]
        model = Radar(cfg.model, old.extractor)
        model.stage1.load_state_dict(old.stage1.state_dict())
        report = model.fit_stage2(list(ds.by_category(cat).train))
        fitted[cat] = model
        sizes = ", ".join(f"{k}={v}" for k, v in report.repository_sizes.items())
        print(f"{cat}: repositories {sizes}; trainable ratio {report.trainable_ratio:.4f}")
    out = args.out or args.ckpt
    save_checkpoint(fitted, out, {k: v for k, v in manifest.items()
                                  if k not in ("format", "version", "config", "categories")}
                    | {"experiment": cfg.to_dict()})
    print(f"stage-2 checkpoint written to {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    models, manifest = load_checkpoint(args.ckpt)
    cfg = _experiment_from_manifest(manifest)
    fpr_limit = args.fpr_limit if args.fpr_limit is not None else cfg.metrics.fpr_limit
    if not 0 < fpr_limit <= 1:
        raise UsageError("--fpr-limit", "must be in (0, 1]")
    ds = _load_data(args.data, cfg)
    out = Path(args.out)
    (out / "seg").mkdir(parents=True, exist_ok=True)
    summary = {"checkpoint": str(args.ckpt), "fpr_limit": fpr_limit, "categories": {}}
    rows = []
    for cat in ds.categories:
        model = models.get(cat)
        if model is None or model.decision is None:
            raise UsageError("--ckpt", f"no fitted stage-2 model for category {cat!r}")
        test = list(ds.by_category(cat).test)
        results = model.predict(test)
        for s, r in zip(test, results):
            rows.append((s.id, cat, s.label, s.mask.pattern, r.sco_a))
            write_tensor(out / "seg" / f"{s.id:06d}.miid", r.seg_m, DTYPE_F32)
        labels = {s.label for s in test}
        if labels == {0, 1}:
            metrics = evaluate(results, test, fpr_limit, cfg.metrics.connectivity)
        else:
            metrics = {}
            log.warning("%s: test split has a single class; metrics skipped", cat)
        summary["categories"][cat] = {"n_test": len(test), **metrics}
        print(f"{cat}: " + " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    scored = [v for v in summary["categories"].values() if "p_auroc" in v]
    if scored:
        summary["mean"] = {k: float(np.mean([v[k] for v in scored])) for k in ("p_auroc", "aupro", "i_auroc")}
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "category", "label", "pattern", "sco_a"])
        w.writerows(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"wrote {len(rows)} scores and seg maps to {out}")
    return EXIT_OK


def _report(results, out: Path, stem: str) -> None:
    paths = emit_report(results, out, stem)
    print(paths["markdown"].read_text())
    print(f"wrote {', '.join(str(p) for p in paths.values())}")


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    _report(run_ablation(cfg, FeatureCache()), args.out, "ablation")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    if any(not 0 <= r <= 1 for r in args.rates):
        raise UsageError("--rates", "rates must lie in [0, 1]")
    _report(run_rates(cfg, args.rates, FeatureCache()), args.out, "bench")
    return EXIT_OK


def cmd_config(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    text = cfg.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="miiad", description="Modality-incomplete RGB + point-cloud anomaly detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--categories", default=",".join(CATEGORIES))
    s.add_argument("--n-train", type=int, default=60)
    s.add_argument("--n-test", type=int, default=40)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--anomaly-fraction", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("missing", help="drop modalities from a dataset")
    s.add_argument("--mode", default="pc", help="pc, rgb or both (or pc_missing, ...)")
    s.add_argument("--rate", type=float, default=0.7)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("data", type=Path)
    s.add_argument("out", type=Path)
    s.set_defaults(func=cmd_missing)

    s = sub.add_parser("train-stage1", help="train instructions and hypernetwork per category")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    _add_model_options(s)
    s.set_defaults(func=cmd_train_stage1)

    s = sub.add_parser("train-stage2", help="fit hybrid layer, repositories and decision models")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, help="output checkpoint (default: overwrite --ckpt)")
    s.add_argument("--no-rphd", action="store_true")
    s.add_argument("--eta")
    s.set_defaults(func=cmd_train_stage2)

    s = sub.add_parser("eval", help="score a test split with a fitted checkpoint")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--fpr-limit", type=float)
    s.set_defaults(func=cmd_eval)

    for name, func, help_ in (("ablate", cmd_ablate, "all eight FE/AIF/RPHD combinations"),
                              ("bench", cmd_bench, "full model across missing rates")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--seeds", type=int)
        s.add_argument("--mode")
        if name == "ablate":
            s.add_argument("--rate", type=float)
        else:
            s.add_argument("--rates", type=_float_list, default=[0.3, 0.5, 0.7])
        _add_model_options(s)
        s.set_defaults(func=func)

    s = sub.add_parser("config", help="print (or write) the effective experiment config")
    s.add_argument("--out", type=Path)
    _add_model_options(s)
    s.set_defaults(func=cmd_config)
    return p


def _set_threads() -> None:
    value = os.environ.get("MIIAD_NUM_THREADS")
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        raise UsageError("MIIAD_NUM_THREADS", f"expected a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError("MIIAD_NUM_THREADS", f"expected a positive integer, got {value!r}")
    torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _set_threads()
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
