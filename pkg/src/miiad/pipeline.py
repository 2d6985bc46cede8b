"""End-to-end two-stage detector for one category."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .blocks import count_parameters
from .data import Sample, fill_pseudo
from .fusion import FusionConfig, Stage1History, Stage1Model, select_instruction, train_stage1
from .hybrid import (
    AnomalyResult,
    DecisionModels,
    HybridConfig,
    HybridLayer,
    SampleFeatures,
    Stage2History,
    apply_hybrid,
    assign_groups,
    build_repositories,
    decide,
    fit_decision,
    make_hybrid_layer,
    score_sample,
    train_stage2,
)
from .point_encoder import PointEncoder, PointEncoderConfig
from .rgb_encoder import RgbEncoder, RgbEncoderConfig

log = logging.getLogger(__name__)


@dataclass
class RadarConfig:
    patch: int = 4
    image_size: int = 32
    backbone_seed: int = 0
    use_fe: bool = True
    use_aif: bool = True
    use_rphd: bool = True
    point: PointEncoderConfig = field(default_factory=PointEncoderConfig)
    rgb: RgbEncoderConfig = field(default_factory=RgbEncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    hybrid: HybridConfig = field(default_factory=HybridConfig)


def _digest(*arrays: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str((a.dtype, a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class FeatureExtractor:
    """Frozen per-modality encoders with a content-keyed cache.

    Both encoders see ones-filled inputs for missing modalities. Since each
    encoder only looks at its own modality, the feature grid of a placeholder
    is the same for every sample and is computed once. Entries are keyed by
    the input arrays themselves, not sample ids, so a defective copy of a
    sample never reuses the original's features.
    """

    def __init__(self, cfg: RadarConfig):
        self.cfg = cfg
        pcfg = PointEncoderConfig(**{**cfg.point.__dict__, "seed": cfg.point.seed + cfg.backbone_seed})
        rcfg = RgbEncoderConfig(**{**cfg.rgb.__dict__, "seed": cfg.rgb.seed + cfg.backbone_seed,
                                   "image_size": cfg.image_size})
        self.point = PointEncoder(pcfg, cfg.patch, extras=cfg.use_fe)
        self.rgb = RgbEncoder(rcfg, cfg.patch)
        self._cache: dict[tuple, np.ndarray] = {}

    def parameter_count(self) -> int:
        return count_parameters(self.point.net) + count_parameters(self.rgb)

    def pc_features(self, s: Sample) -> np.ndarray:
        key = ("pc", _digest(s.pc.coords, s.pc.validity) if s.mask.has_pc else "pseudo", s.shape)
        if key not in self._cache:
            self._cache[key] = self.point(fill_pseudo(s).pc)
        return self._cache[key]

    def rgb_features(self, s: Sample) -> np.ndarray:
        key = ("rgb", _digest(s.rgb) if s.mask.has_rgb else "pseudo", s.shape)
        if key not in self._cache:
            self._cache[key] = self.rgb.features(fill_pseudo(s).rgb)
        return self._cache[key]

    def __call__(self, samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([self.pc_features(s) for s in samples]),
                np.stack([self.rgb_features(s) for s in samples]))


@dataclass
class FitReport:
    stage1: Stage1History
    stage2: Stage2History | None
    parameter_counts: dict[str, int]
    train_image_scores: np.ndarray
    repository_sizes: dict[str, int]

    @property
    def trainable_ratio(self) -> float:
        c = self.parameter_counts
        return c["trainable"] / c["total"]


class Radar:
    """Features -> stage 1 fusion -> optional hybrid layer -> repositories -> decision."""

    def __init__(self, cfg: RadarConfig | None = None, extractor: FeatureExtractor | None = None):
        self.cfg = cfg = cfg or RadarConfig()
        self.extractor = extractor or FeatureExtractor(cfg)
        fcfg = FusionConfig(**{**cfg.fusion.__dict__, "use_aif": cfg.use_aif})
        self.stage1 = Stage1Model(self.extractor.point.out_dim, self.extractor.rgb.out_dim, fcfg, cfg.backbone_seed)
        self.hybrid: HybridLayer | None = None
        if cfg.use_rphd:
            self.hybrid = make_hybrid_layer(fcfg.out_dim, cfg.hybrid)
        self.repos = None
        self.decision: DecisionModels | None = None
        self.grid = (cfg.image_size // cfg.patch, cfg.image_size // cfg.patch)

    def parameter_counts(self) -> dict[str, int]:
        counts = self.stage1.parameter_counts()
        counts["encoders"] = self.extractor.parameter_count()
        counts["trainable"] = counts["instructions"] + counts["hypernetwork"] if self.cfg.use_aif else 0
        counts["total"] = sum(counts[k] for k in ("instructions", "hypernetwork", "adapters", "fusion_backbone", "encoders"))
        counts["hybrid_layer"] = count_parameters(self.hybrid) if self.hybrid is not None else 0
        return counts

    @torch.no_grad()
    def _stage1_features(self, samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
        f_pc, f_rgb = self.extractor(samples)
        instr = torch.as_tensor([select_instruction(s.mask) for s in samples])
        out = self.stage1(torch.as_tensor(f_pc, dtype=torch.float32), torch.as_tensor(f_rgb, dtype=torch.float32), instr)
        return out.g_pc.double().numpy(), out.g_rgb.double().numpy()

    def features(self, samples: list[Sample]) -> list[SampleFeatures]:
        g_pc, g_rgb = self._stage1_features(samples)
        n_pc = g_pc.shape[1]
        if self.hybrid is not None:
            tokens = np.concatenate([g_pc, g_rgb], axis=1)
            pseudo = np.stack([assign_groups(s.mask, n_pc, g_rgb.shape[1]).pseudo for s in samples])
            out = apply_hybrid(self.hybrid, tokens, pseudo)
            g_pc, g_rgb = out[:, :n_pc], out[:, n_pc:]
        return [SampleFeatures(s.id, s.mask, g_pc[i], g_rgb[i], 0.5 * (g_pc[i] + g_rgb[i]))
                for i, s in enumerate(samples)]

    def fit_stage1(self, train: list[Sample]) -> Stage1History:
        f_pc, f_rgb = self.extractor(train)
        return train_stage1(self.stage1, f_pc, f_rgb, [s.mask for s in train])

    def fit_stage2(self, train: list[Sample], stage1: Stage1History | None = None) -> FitReport:
        """Hybrid layer (if enabled), repositories and decision models on a trained stage 1."""
        cfg = self.cfg
        masks = [s.mask for s in train]
        hist2 = None
        if self.hybrid is not None:
            g_pc, g_rgb = self._stage1_features(train)
            tokens = np.concatenate([g_pc, g_rgb], axis=1)
            pseudo = np.stack([assign_groups(m, g_pc.shape[1], g_rgb.shape[1]).pseudo for m in masks])
            reg_targets = (0.5 * (g_pc + g_rgb)).mean(axis=1)
            hist2, _ = train_stage2(self.hybrid, tokens, pseudo, masks, reg_targets, cfg.hybrid)
        feats = self.features(train)
        self.repos = build_repositories(feats, cfg.hybrid.coreset_fraction, cfg.hybrid.seed)
        image_scores, patch_vectors = [], []
        for sf in feats:
            # leave-one-out: a training sample never matches its own bank rows
            img, patches = score_sample(self.repos, sf, cfg.hybrid.phi_neighbors, cfg.hybrid.eta, exclude_self=True)
            image_scores.append(img)
            patch_vectors.append(patches)
        image_scores = np.stack(image_scores)
        patch_vectors = np.concatenate(patch_vectors)
        finite_img = np.isfinite(image_scores).all(axis=1)
        finite = np.isfinite(patch_vectors).all(axis=1)
        self.decision = fit_decision(image_scores[finite_img], patch_vectors[finite], cfg.hybrid, seed=cfg.hybrid.seed)
        return FitReport(stage1 or Stage1History(), hist2, self.parameter_counts(), image_scores,
                         {k: len(v) for k, v in self.repos.items()})

    def fit(self, train: list[Sample]) -> FitReport:
        return self.fit_stage2(train, self.fit_stage1(train))

    def score_vectors(self, samples: list[Sample]) -> list[tuple[np.ndarray, np.ndarray]]:
        if self.repos is None:
            raise RuntimeError("model is not fitted")
        return [score_sample(self.repos, sf, self.cfg.hybrid.phi_neighbors, self.cfg.hybrid.eta)
                for sf in self.features(samples)]

    def predict(self, samples: list[Sample]) -> list[AnomalyResult]:
        if self.decision is None:
            raise RuntimeError("model is not fitted")
        return [decide(self.decision, img, patches, self.grid, s.shape)
                for s, (img, patches) in zip(samples, self.score_vectors(samples))]
