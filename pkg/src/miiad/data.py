"""Synthetic multimodal samples and the modality-incomplete split protocol.

Each sample pairs an RGB image with an organized point grid (one xyz triple
per pixel plus a validity bit). Samples are generated procedurally from a
small set of surface archetypes so that normal variation, defect geometry and
ground-truth masks are all known exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

CATEGORIES = ("dome", "disk", "slab")
ANOMALY_KINDS = ("bump", "dent", "color_blotch", "hole")

# scene extent in metres; objects are about 0.1 m across
_EXTENT = 0.05
_NOISE = 3e-4


@dataclass(frozen=True)
class ModalityMask:
    has_rgb: bool = True
    has_pc: bool = True

    def __post_init__(self):
        if not (self.has_rgb or self.has_pc):
            raise ValueError("a sample must keep at least one modality")

    @property
    def complete(self) -> bool:
        return self.has_rgb and self.has_pc

    @property
    def pattern(self) -> str:
        if self.complete:
            return "complete"
        return "rgb_only" if self.has_rgb else "pc_only"


@dataclass(frozen=True)
class PointGrid:
    coords: np.ndarray  # H x W x 3
    validity: np.ndarray  # H x W bool

    def __post_init__(self):
        if self.coords.ndim != 3 or self.coords.shape[2] != 3:
            raise ValueError(f"coords must be HxWx3, got {self.coords.shape}")
        if self.validity.shape != self.coords.shape[:2]:
            raise ValueError("validity shape does not match coords")
        if not np.isfinite(self.coords[self.validity]).all():
            raise ValueError("non-finite coordinates at valid pixels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.coords.shape[:2]


@dataclass(frozen=True)
class GroundTruth:
    anomaly_mask: np.ndarray  # H x W bool

    @property
    def is_anomalous(self) -> bool:
        return bool(self.anomaly_mask.any())

    @property
    def image_label(self) -> str:
        return "anomalous" if self.is_anomalous else "normal"


@dataclass(frozen=True)
class Sample:
    """One object instance.

    ``rgb`` is an ``H x W x 3`` array in ``[0, 1]``. After :func:`fill_pseudo`
    a missing modality is replaced by an all-ones tensor while ``mask`` keeps
    recording what was actually observed.
    """

    rgb: np.ndarray | None
    pc: PointGrid | None
    gt: GroundTruth
    mask: ModalityMask
    category: str
    id: int

    @property
    def shape(self) -> tuple[int, int]:
        if self.rgb is not None:
            return self.rgb.shape[:2]
        return self.pc.shape

    @property
    def label(self) -> int:
        return int(self.gt.is_anomalous)


@dataclass(frozen=True)
class MiiadDataset:
    train: tuple[Sample, ...]
    test: tuple[Sample, ...]
    categories: tuple[str, ...]

    def __post_init__(self):
        if any(s.gt.is_anomalous for s in self.train):
            raise ValueError("training split must contain normal samples only")

    def by_category(self, category: str) -> "MiiadDataset":
        return MiiadDataset(
            train=tuple(s for s in self.train if s.category == category),
            test=tuple(s for s in self.test if s.category == category),
            categories=(category,),
        )


class MissingMode(str, enum.Enum):
    PC_MISSING = "pc_missing"
    RGB_MISSING = "rgb_missing"
    BOTH_MISSING = "both_missing"

    @classmethod
    def parse(cls, value: "str | MissingMode") -> "MissingMode":
        if isinstance(value, cls):
            return value
        aliases = {"pc": cls.PC_MISSING, "rgb": cls.RGB_MISSING, "both": cls.BOTH_MISSING}
        return aliases.get(value) or cls(value)


@dataclass(frozen=True)
class MissingSpec:
    mode: MissingMode = MissingMode.PC_MISSING
    rate: float = 0.7
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", MissingMode.parse(self.mode))
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"missing rate must lie in [0, 1], got {self.rate}")


# ---------------------------------------------------------------------------
# synthesis


@dataclass
class _Shape:
    height: np.ndarray
    texture: np.ndarray
    color: np.ndarray
    tilt: tuple[float, float]
    noise: np.ndarray = field(repr=False)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = (np.arange(size) + 0.5) / size * 2 * _EXTENT - _EXTENT
    return np.meshgrid(ax, ax, indexing="xy")


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _archetype(category: str, size: int, rng: np.random.Generator) -> _Shape:
    x, y = _grid(size)
    cx, cy = rng.uniform(-0.004, 0.004, size=2)
    x, y = x - cx, y - cy
    r = np.hypot(x, y)
    if category == "dome":
        radius = rng.uniform(0.034, 0.040)
        peak = rng.uniform(0.018, 0.024)
        height = peak * np.sqrt(np.clip(1 - (r / radius) ** 2, 0, None))
        texture = _smooth_noise(rng, size, size / 10)
        color = np.array([0.78, 0.55, 0.30]) + rng.uniform(-0.03, 0.03, 3)
    elif category == "disk":
        radius = rng.uniform(0.028, 0.033)
        base = rng.uniform(0.010, 0.013)
        period = rng.uniform(0.010, 0.013)
        phase = rng.uniform(0, 2 * np.pi)
        ridges = 0.0025 * np.sin(2 * np.pi * r / period + phase)
        height = np.where(r < radius, base + ridges, 0.0)
        texture = np.sin(2 * np.pi * r / period + phase) + 0.5 * _smooth_noise(rng, size, size / 12)
        color = np.array([0.45, 0.50, 0.62]) + rng.uniform(-0.03, 0.03, 3)
    elif category == "slab":
        theta = rng.uniform(-0.2, 0.2)
        u = np.cos(theta) * x + np.sin(theta) * y
        v = -np.sin(theta) * x + np.cos(theta) * y
        half = rng.uniform(0.027, 0.031)
        inside = (np.abs(u) < half) & (np.abs(v) < 0.8 * half)
        bumps = 0.0012 * np.sin(u / 0.004) * np.sin(v / 0.004)
        height = np.where(inside, rng.uniform(0.012, 0.015) + bumps, 0.0)
        texture = _smooth_noise(rng, size, 1.0)
        color = np.array([0.55, 0.66, 0.42]) + rng.uniform(-0.03, 0.03, 3)
    else:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    tilt = tuple(rng.uniform(-0.05, 0.05, size=2))
    noise = rng.normal(0.0, _NOISE, size=(size, size))
    return _Shape(height, texture, np.clip(color, 0, 1), tilt, noise)


def _render(height: np.ndarray, texture: np.ndarray, color: np.ndarray) -> np.ndarray:
    """Shade a heightmap: Lambertian term plus curvature tint plus albedo texture."""
    size = height.shape[0]
    pitch = 2 * _EXTENT / size
    gy, gx = np.gradient(height, pitch)
    normal = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    light = np.array([-0.4, -0.4, 0.82])
    light /= np.linalg.norm(light)
    lambert = np.clip(normal @ light, 0.0, 1.0)
    curvature = ndimage.laplace(height) / pitch**2 * 1e-3
    albedo = 0.62 + 0.22 * lambert + 0.08 * texture - 0.15 * np.tanh(curvature)
    background = height <= 0
    rgb = color[None, None, :] * albedo[..., None]
    rgb[background] = 0.12 + 0.02 * texture[background, None]
    return np.clip(rgb, 0.0, 1.0)


def _compose(shape: _Shape, height: np.ndarray) -> np.ndarray:
    x, y = _grid(height.shape[0])
    plane = shape.tilt[0] * x + shape.tilt[1] * y
    return np.stack([x, y, plane + height + shape.noise], axis=-1)


def synth_normal(category: str, size: int = 32, seed: int = 0, id: int = 0) -> Sample:
    """Generate a defect-free sample of ``category`` on a ``size x size`` grid."""
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    rng = np.random.default_rng([CATEGORIES.index(category), size, seed])
    shape = _archetype(category, size, rng)
    rgb = _render(shape.height, shape.texture, shape.color)
    rgb = np.clip(rgb + rng.normal(0, 0.01, rgb.shape), 0, 1)
    pc = PointGrid(_compose(shape, shape.height), np.ones((size, size), dtype=bool))
    gt = GroundTruth(np.zeros((size, size), dtype=bool))
    return Sample(rgb, pc, gt, ModalityMask(), category, id)


def _defect_region(sample: Sample, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pick a disc on the object; return (normalized radial profile, disc mask)."""
    size = sample.shape[0]
    z = sample.pc.coords[..., 2]
    x, y = sample.pc.coords[..., 0], sample.pc.coords[..., 1]
    # object pixels: clearly above a plane fitted to the border ring
    ring = np.zeros((size, size), dtype=bool)
    ring[[0, -1], :] = ring[:, [0, -1]] = True
    design = np.stack([x[ring], y[ring], np.ones(ring.sum())], axis=1)
    coef, *_ = np.linalg.lstsq(design, z[ring], rcond=None)
    rel = z - (coef[0] * x + coef[1] * y + coef[2])
    radius = rng.uniform(max(2.0, size / 10), max(2.5, size / 6.5))
    margin = int(math.ceil(radius))
    obj = ndimage.binary_erosion(rel > 0.005, iterations=margin)
    candidates = np.argwhere(obj)
    if len(candidates) == 0:
        candidates = np.argwhere(rel > 0.005)
    cy, cx = candidates[rng.integers(len(candidates))]
    rows, cols = np.mgrid[:size, :size]
    dist = np.hypot(rows - cy, cols - cx)
    disc = dist < radius
    profile = np.where(disc, 1.0 - (dist / radius) ** 2, 0.0)
    return profile, disc


def synth_anomaly(base: Sample, kind: str, seed: int = 0) -> Sample:
    """Inject one localized defect into a complete, normal ``base`` sample.

    ``bump``/``dent`` displace the surface (and re-shade the RGB inside the
    defect), ``hole`` drops points and darkens the image, ``color_blotch``
    touches the RGB only. The anomaly mask is exactly the set of changed pixels.
    """
    if base.gt.is_anomalous:
        raise ValueError("base sample is already anomalous")
    if base.rgb is None or base.pc is None:
        raise ValueError("base sample must be complete")
    if kind not in ANOMALY_KINDS:
        raise ValueError(f"unknown anomaly kind {kind!r}; expected one of {ANOMALY_KINDS}")
    rng = np.random.default_rng([base.id, ANOMALY_KINDS.index(kind), seed, 17])
    profile, disc = _defect_region(base, rng)
    rgb = base.rgb.copy()
    coords = base.pc.coords.copy()
    validity = base.pc.validity.copy()
    if kind in ("bump", "dent"):
        amp = rng.uniform(0.008, 0.012) * (1 if kind == "bump" else -1)
        coords[..., 2] += amp * profile
        # re-shade with the same lighting; only pixels inside the disc change
        size = base.shape[0]
        pitch = 2 * _EXTENT / size
        gy, gx = np.gradient(amp * profile, pitch)
        shade = 0.6 * (0.4 * gx + 0.4 * gy) / (1 + np.hypot(gx, gy))
        rgb[disc] = np.clip(rgb[disc] * (1 + shade[disc, None]) - 0.04 * np.sign(amp), 0, 1)
    elif kind == "hole":
        validity[disc] = False
        rgb[disc] = rgb[disc] * 0.6
    else:
        tint = rng.uniform(0, 1, 3)
        alpha = 0.7 * np.sqrt(profile)[..., None]
        rgb = np.where(disc[..., None], (1 - alpha) * rgb + alpha * tint, rgb)
    pc = PointGrid(coords, validity)
    return replace(base, rgb=rgb, pc=pc, gt=GroundTruth(disc.copy()))


def make_dataset(
    categories: Sequence[str] = CATEGORIES,
    n_train: int = 60,
    n_test: int = 40,
    size: int = 32,
    seed: int = 0,
    anomaly_fraction: float = 0.5,
) -> MiiadDataset:
    """Build a complete (no modality missing) dataset, ``n_train``/``n_test`` per category."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    next_id = 0
    for cat in categories:
        for _ in range(n_train):
            train.append(synth_normal(cat, size, int(rng.integers(2**31)), id=next_id))
            next_id += 1
        n_anom = int(round(anomaly_fraction * n_test))
        for i in range(n_test):
            s = synth_normal(cat, size, int(rng.integers(2**31)), id=next_id)
            next_id += 1
            if i < n_anom:
                kind = ANOMALY_KINDS[int(rng.integers(len(ANOMALY_KINDS)))]
                s = synth_anomaly(s, kind, int(rng.integers(2**31)))
            test.append(s)
    return MiiadDataset(tuple(train), tuple(test), tuple(categories))


# ---------------------------------------------------------------------------
# modality-incomplete protocol


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def missing_counts(n: int, spec: MissingSpec) -> tuple[int, int]:
    """Return ``(n_rgb_only, n_pc_only)`` for a split of ``n`` samples."""
    total = round_half_up(spec.rate * n)
    if spec.mode is MissingMode.PC_MISSING:
        return total, 0
    if spec.mode is MissingMode.RGB_MISSING:
        return 0, total
    # odd totals: the rgb-only group takes the extra sample
    return total - total // 2, total // 2


def _drop(sample: Sample, has_rgb: bool, has_pc: bool) -> Sample:
    return replace(
        sample,
        rgb=sample.rgb if has_rgb else None,
        pc=sample.pc if has_pc else None,
        mask=ModalityMask(has_rgb, has_pc),
    )


def _apply_split(samples: Sequence[Sample], spec: MissingSpec, split_key: int) -> tuple[Sample, ...]:
    n_rgb_only, n_pc_only = missing_counts(len(samples), spec)
    rng = np.random.default_rng([spec.seed, split_key])
    order = rng.permutation(len(samples))
    rgb_only = set(order[:n_rgb_only].tolist())
    pc_only = set(order[n_rgb_only:n_rgb_only + n_pc_only].tolist())
    out = []
    for i, s in enumerate(samples):
        if not s.mask.complete:
            raise ValueError(f"sample {s.id} is already modality-incomplete")
        if i in rgb_only:
            s = _drop(s, has_rgb=True, has_pc=False)
        elif i in pc_only:
            s = _drop(s, has_rgb=False, has_pc=True)
        out.append(s)
    return tuple(out)


def apply_missing(ds: MiiadDataset, spec: MissingSpec) -> MiiadDataset:
    """Remove modalities from a random subset of each split.

    The number of affected samples per split is ``round(rate * n)`` (half-up).
    Train and test are drawn independently but both depend only on ``spec.seed``.
    """
    return MiiadDataset(
        train=_apply_split(ds.train, spec, 0),
        test=_apply_split(ds.test, spec, 1),
        categories=ds.categories,
    )


def fill_pseudo(s: Sample) -> Sample:
    """Replace any absent modality with an all-ones tensor of the same grid shape."""
    h, w = s.shape
    rgb, pc = s.rgb, s.pc
    if rgb is None:
        rgb = np.ones((h, w, 3))
    if pc is None:
        pc = PointGrid(np.ones((h, w, 3)), np.ones((h, w), dtype=bool))
    if rgb is s.rgb and pc is s.pc:
        return s
    return replace(s, rgb=rgb, pc=pc)


# ---------------------------------------------------------------------------
# preprocessing


def fit_plane_lstsq(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Total-least-squares plane ``n . p + d = 0`` with unit normal."""
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    return normal, -float(normal @ centroid)


def remove_background_plane(
    pc: PointGrid, threshold: float = 0.005, iterations: int = 256, seed: int = 0
) -> PointGrid:
    """RANSAC plane fit; points within ``threshold`` of the plane become invalid."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    pts = pc.coords[pc.validity]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 valid points for a plane fit, got {len(pts)}")
    rng = np.random.default_rng(seed)
    best_count, best_inliers = -1, None
    for _ in range(iterations):
        a, b, c = pts[rng.choice(len(pts), size=3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-15:
            continue
        normal /= norm
        inliers = np.abs((pts - a) @ normal) < threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
    if best_inliers is None or best_inliers.sum() < 3:
        return pc
    normal, d = fit_plane_lstsq(pts[best_inliers])
    dist = np.abs(pc.coords @ normal + d)
    validity = pc.validity & ~(dist < threshold)
    return PointGrid(pc.coords, validity)


def _resize(arr: np.ndarray, size: int, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    squeeze = t.ndim == 2
    t = t[None, None] if squeeze else t.permute(2, 0, 1)[None]
    if mode == "bilinear":
        out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(t, size=(size, size), mode="nearest-exact")
    out = out[0, 0] if squeeze else out[0].permute(1, 2, 0)
    return out.numpy()


def resize_to_grid(s: Sample, size: int) -> Sample:
    """Resize every per-pixel field: bilinear for values, nearest for masks."""
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    if s.shape == (size, size):
        return s
    rgb = None if s.rgb is None else np.clip(_resize(s.rgb, size, "bilinear"), 0, 1)
    pc = None
    if s.pc is not None:
        pc = PointGrid(_resize(s.pc.coords, size, "bilinear"), _resize(s.pc.validity, size, "nearest") > 0.5)
    gt = GroundTruth(_resize(s.gt.anomaly_mask, size, "nearest") > 0.5)
    return replace(s, rgb=rgb, pc=pc, gt=gt)


def preprocess(s: Sample, size: int | None = None, threshold: float = 0.005, iterations: int = 256) -> Sample:
    """Plane removal on the point grid (when present) followed by grid resizing."""
    if s.pc is not None and s.pc.validity.sum() >= 3:
        s = replace(s, pc=remove_background_plane(s.pc, threshold, iterations, seed=s.id))
    if size is not None:
        s = resize_to_grid(s, size)
    return s


def preprocess_dataset(ds: MiiadDataset, size: int | None = None, **kwargs) -> MiiadDataset:
    return MiiadDataset(
        tuple(preprocess(s, size, **kwargs) for s in ds.train),
        tuple(preprocess(s, size, **kwargs) for s in ds.test),
        ds.categories,
    )


def iter_samples(ds: MiiadDataset) -> Iterable[Sample]:
    yield from ds.train
    yield from ds.test
