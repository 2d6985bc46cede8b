"""Modality-incomplete industrial anomaly detection on RGB + point-cloud grids."""

from .data import (
    CATEGORIES,
    MissingMode,
    MissingSpec,
    ModalityMask,
    Sample,
    apply_missing,
    fill_pseudo,
    make_dataset,
    preprocess,
    synth_anomaly,
    synth_normal,
)
from .metrics import aupro, auroc, pixel_auroc
from .pipeline import FeatureExtractor, Radar, RadarConfig

__version__ = "0.1.0"
