"""Experiment configuration: nested dataclasses with a lossless JSON form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import CATEGORIES, MissingMode
from .pipeline import RadarConfig


class ConfigError(ValueError):
    """Validation failure; ``errors`` lists ``(field path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


@dataclass
class DataConfig:
    categories: tuple[str, ...] = CATEGORIES
    n_train: int = 60
    n_test: int = 40
    size: int = 32
    anomaly_fraction: float = 0.5
    seed: int = 0
    ransac_threshold: float = 0.005
    ransac_iterations: int = 256


@dataclass
class MissingConfig:
    mode: str = "pc"
    rate: float = 0.7
    seed: int = 0


@dataclass
class MetricConfig:
    fpr_limit: float = 0.3
    connectivity: int = 8


@dataclass
class ExperimentConfig:
    name: str = "radar"
    data: DataConfig = field(default_factory=DataConfig)
    missing: MissingConfig = field(default_factory=MissingConfig)
    model: RadarConfig = field(default_factory=RadarConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    n_seeds: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        errors: list[tuple[str, str]] = []
        cfg = _build(cls, data, "", errors)
        if not errors:
            errors.extend(validate(cfg))
        if errors:
            raise ConfigError(errors)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([("<root>", f"invalid JSON: {exc}")]) from exc
        if not isinstance(data, dict):
            raise ConfigError([("<root>", "expected a JSON object")])
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_seed_offset(self, k: int) -> "ExperimentConfig":
        """Shift the data, missing, stage-1 and stage-2 seeds by ``k``.

        The frozen encoders and fusion backbone stand in for pretrained
        weights, so the backbone seed is left alone.
        """
        cfg = ExperimentConfig.from_dict(self.to_dict())
        cfg.data.seed += k
        cfg.missing.seed += k
        cfg.model.fusion.seed += k
        cfg.model.hybrid.seed += k
        return cfg


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def _coerce(tp, value, path: str, errors: list[tuple[str, str]]):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            errors.append((path, f"expected an object, got {type(value).__name__}"))
            return None
        return _build(tp, value, path, errors)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path, errors)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            errors.append((path, f"expected a list, got {type(value).__name__}"))
            return None
        elem = args[0] if args else typing.Any
        fixed = not (len(args) == 2 and args[1] is Ellipsis)
        if fixed and len(args) != len(value):
            errors.append((path, f"expected {len(args)} items, got {len(value)}"))
            return None
        types_ = args if fixed else [elem] * len(value)
        return tuple(_coerce(t, v, f"{path}[{i}]", errors) for i, (t, v) in enumerate(zip(types_, value)))
    if tp is bool:
        if not isinstance(value, bool):
            errors.append((path, f"expected a boolean, got {value!r}"))
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append((path, f"expected an integer, got {value!r}"))
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append((path, f"expected a number, got {value!r}"))
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            errors.append((path, f"expected a string, got {value!r}"))
        return value
    return value


def _build(cls, data: dict, path: str, errors: list[tuple[str, str]]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            errors.append((_join(path, key), "unknown field"))
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], _join(path, f.name), errors)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append((path or "<root>", str(exc)))
        return None


def validate(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    """Semantic checks beyond types; returns ``(field path, message)`` pairs."""
    errs = []
    d, m, mdl = cfg.data, cfg.missing, cfg.model
    if not d.categories:
        errs.append(("data.categories", "at least one category is required"))
    for i, c in enumerate(d.categories):
        if c not in CATEGORIES:
            errs.append((f"data.categories[{i}]", f"unknown category {c!r}; expected one of {CATEGORIES}"))
    if d.n_train < 4:
        errs.append(("data.n_train", "need at least 4 training samples per category"))
    if d.n_test < 2:
        errs.append(("data.n_test", "need at least 2 test samples per category"))
    if d.size < 8:
        errs.append(("data.size", "grid size must be >= 8"))
    if not 0 <= d.anomaly_fraction <= 1:
        errs.append(("data.anomaly_fraction", "must be in [0, 1]"))
    if d.ransac_threshold <= 0:
        errs.append(("data.ransac_threshold", "must be positive"))
    try:
        MissingMode.parse(m.mode)
    except ValueError as exc:
        errs.append(("missing.mode", str(exc)))
    if not 0 <= m.rate <= 1:
        errs.append(("missing.rate", "must be in [0, 1]"))
    if mdl.image_size != d.size:
        errs.append(("model.image_size", f"must equal data.size ({d.size})"))
    if mdl.patch < 1 or mdl.image_size % mdl.patch:
        errs.append(("model.patch", f"must divide model.image_size ({mdl.image_size})"))
    if mdl.point.interp not in ("normalized", "literal"):
        errs.append(("model.point.interp", "must be 'normalized' or 'literal'"))
    if mdl.point.epsilon <= 0:
        errs.append(("model.point.epsilon", "must be positive"))
    if mdl.fusion.temperature <= 0:
        errs.append(("model.fusion.temperature", "must be positive"))
    if mdl.fusion.activation not in ("gelu", "linear"):
        errs.append(("model.fusion.activation", "must be 'gelu' or 'linear'"))
    if mdl.fusion.width % mdl.fusion.heads:
        errs.append(("model.fusion.heads", "must divide model.fusion.width"))
    h = mdl.hybrid
    if h.ocsvm_mode not in ("sgd", "exact"):
        errs.append(("model.hybrid.ocsvm_mode", "must be 'sgd' or 'exact'"))
    if not 0 < h.ocsvm_nu <= 1:
        errs.append(("model.hybrid.ocsvm_nu", "must be in (0, 1]"))
    if not 0 < h.coreset_fraction <= 1:
        errs.append(("model.hybrid.coreset_fraction", "must be in (0, 1]"))
    if h.phi_neighbors < 1:
        errs.append(("model.hybrid.phi_neighbors", "must be >= 1"))
    if not (h.eta == "patchcore" or h.eta.startswith("constant:")):
        errs.append(("model.hybrid.eta", "must be 'patchcore' or 'constant:<value>'"))
    if not 0 < cfg.metrics.fpr_limit <= 1:
        errs.append(("metrics.fpr_limit", "must be in (0, 1]"))
    if cfg.metrics.connectivity not in (4, 8):
        errs.append(("metrics.connectivity", "must be 4 or 8"))
    if cfg.n_seeds < 1:
        errs.append(("n_seeds", "must be >= 1"))
    return errs
