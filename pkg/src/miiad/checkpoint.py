"""Checkpoints: a JSON manifest plus one MIID tensor per stored array.

Layout::

    ckpt/manifest.json
    ckpt/<category>/<tensor name>.miid

The manifest holds the model config, the stage reached per category, every
tensor's name and shape, scalar fields of the decision models, and parameter
counts. Frozen parts (encoders, adapters, fusion backbone) are rebuilt from
the config seeds; a fingerprint of their weights guards against a mismatch.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, _build
from .hybrid import REPOSITORIES, DecisionModels, MahalanobisModel, MemoryRepository, OneClassModel
from .io import DTYPE_F64, read_tensor, write_tensor
from .pipeline import FeatureExtractor, Radar, RadarConfig

FORMAT = "miiad-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def radar_config_from_dict(data: dict) -> RadarConfig:
    errors: list[tuple[str, str]] = []
    cfg = _build(RadarConfig, data, "model", errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def frozen_fingerprint(model: Radar) -> float:
    """Sum of absolute frozen weights; identical configs give identical values."""
    mods = [model.extractor.point.net, model.extractor.rgb, model.stage1.backbone,
            model.stage1.pc_adapter, model.stage1.rgb_adapter]
    return float(sum(p.detach().double().abs().sum() for m in mods for p in m.parameters()))


def _state(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().double().numpy() for k, v in module.state_dict().items()}


def _model_tensors(model: Radar) -> dict[str, np.ndarray]:
    out = {}
    out.update(_state("instructions", model.stage1.instructions))
    out.update(_state("hyper", model.stage1.hyper))
    if model.hybrid is not None:
        out.update(_state("hybrid", model.hybrid))
    if model.repos is not None:
        for name, repo in model.repos.items():
            out[f"repo.{name}.bank"] = repo.bank
            out[f"repo.{name}.sample_ids"] = repo.sample_ids
            out[f"repo.{name}.token_ids"] = repo.token_ids
            out[f"repo.{name}.pseudo"] = repo.pseudo
    if model.decision is not None:
        mdm, svm = model.decision.mdm, model.decision.ocsvm
        out.update({"mdm.mean": mdm.mean, "mdm.cov": mdm.cov, "mdm.precision": mdm.precision,
                    "ocsvm.support": svm.support, "ocsvm.coef": svm.coef})
        if svm.loc is not None:
            out.update({"ocsvm.loc": svm.loc, "ocsvm.scale": svm.scale})
    return out


def save_checkpoint(models: dict[str, Radar], out: str | Path, extra: dict | None = None) -> Path:
    """Write one checkpoint holding a fitted (or stage-1 only) model per category."""
    if not models:
        raise CheckpointError("nothing to save")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    first = next(iter(models.values()))
    manifest = {"format": FORMAT, "version": VERSION, "config": dataclasses.asdict(first.cfg),
                "categories": {}, **(extra or {})}
    for cat, model in models.items():
        if model.cfg != first.cfg:
            raise CheckpointError("all categories in one checkpoint must share a config")
        root = out / cat
        root.mkdir(exist_ok=True)
        tensors = {}
        for name, arr in _model_tensors(model).items():
            arr = np.asarray(arr, dtype=np.float64)
            write_tensor(root / f"{name}.miid", arr, DTYPE_F64)
            tensors[name] = list(arr.shape)
        entry = {
            "stage": 2 if model.decision is not None else 1,
            "tensors": tensors,
            "parameter_counts": model.parameter_counts(),
            "frozen_fingerprint": frozen_fingerprint(model),
        }
        if model.decision is not None:
            svm = model.decision.ocsvm
            entry["ocsvm"] = {"gamma": svm.gamma, "rho": svm.rho, "nu": svm.nu}
        manifest["categories"][cat] = entry
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise CheckpointError(f"{path}: no manifest.json")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a version-{VERSION} {FORMAT}")
    return manifest


def _load_module(module: torch.nn.Module, prefix: str, tensors: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    new = {}
    for k, v in state.items():
        key = f"{prefix}.{k}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key}")
        if tuple(tensors[key].shape) != tuple(v.shape):
            raise CheckpointError(f"{key}: shape {tensors[key].shape} != model shape {tuple(v.shape)}")
        new[k] = torch.as_tensor(tensors[key], dtype=v.dtype)
    module.load_state_dict(new)


def load_checkpoint(path: str | Path, cfg: RadarConfig | None = None,
                    extractors: dict | None = None) -> tuple[dict[str, Radar], dict]:
    """Rebuild every category's model; ``cfg``, when given, must match the stored one."""
    path = Path(path)
    manifest = read_manifest(path)
    stored = radar_config_from_dict(manifest["config"])
    if cfg is not None and cfg != stored:
        raise CheckpointError("config does not match the checkpoint's config")
    models = {}
    for cat, entry in manifest["categories"].items():
        tensors = {name: read_tensor(path / cat / f"{name}.miid") for name in entry["tensors"]}
        ex = extractors.get(cat) if extractors else None
        model = Radar(stored, ex or FeatureExtractor(stored))
        if not np.isclose(frozen_fingerprint(model), entry["frozen_fingerprint"], rtol=1e-9, atol=0):
            raise CheckpointError(f"{cat}: frozen weights differ from the ones the checkpoint was trained with")
        _load_module(model.stage1.instructions, "instructions", tensors)
        _load_module(model.stage1.hyper, "hyper", tensors)
        if model.hybrid is not None and any(k.startswith("hybrid.") for k in tensors):
            _load_module(model.hybrid, "hybrid", tensors)
        if entry["stage"] >= 2:
            model.repos = {
                n: MemoryRepository(n, tensors[f"repo.{n}.bank"], tensors[f"repo.{n}.sample_ids"].astype(np.int64),
                                    tensors[f"repo.{n}.token_ids"].astype(np.int64),
                                    tensors[f"repo.{n}.pseudo"].astype(bool))
                for n in REPOSITORIES
            }
            oc = entry["ocsvm"]
            model.decision = DecisionModels(
                MahalanobisModel(tensors["mdm.mean"], tensors["mdm.cov"], tensors["mdm.precision"]),
                OneClassModel(tensors["ocsvm.support"], tensors["ocsvm.coef"], oc["gamma"], oc["rho"], oc["nu"],
                              tensors.get("ocsvm.loc"), tensors.get("ocsvm.scale")),
            )
        models[cat] = model
    return models, manifest
