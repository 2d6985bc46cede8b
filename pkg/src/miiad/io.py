"""On-disk formats: MIID raw tensors, dataset directories and JSON sidecars.

A MIID file is a 16-byte preamble (``b"MIID"``, version, rank, dtype code;
all little-endian u32) followed by ``rank`` u32 dimensions and the payload in
C order. Dataset tensors are little-endian float32 (dtype code 0); checkpoints
may also store float64 (dtype code 1) so fitted banks round-trip exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import GroundTruth, MiiadDataset, ModalityMask, PointGrid, Sample

MAGIC = b"MIID"
VERSION = 1
DTYPE_F32 = 0
DTYPE_F64 = 1
_DTYPES = {DTYPE_F32: "<f4", DTYPE_F64: "<f8"}


class FormatError(ValueError):
    pass


def write_tensor(path: str | Path, array: np.ndarray, dtype: int = DTYPE_F32) -> None:
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype code {dtype}")
    arr = np.asarray(array, dtype=_DTYPES[dtype], order="C")
    header = MAGIC + struct.pack("<III", VERSION, arr.ndim, dtype)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header + dims + arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Float32 tensors come back as float32, float64 ones as float64."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a MIID tensor")
    version, rank, dtype = struct.unpack("<III", raw[4:16])
    if version != VERSION or dtype not in _DTYPES:
        raise FormatError(f"{path}: unsupported version {version} / dtype {dtype}")
    end = 16 + 4 * rank
    shape = struct.unpack(f"<{rank}I", raw[16:end])
    item = np.dtype(_DTYPES[dtype]).itemsize
    if len(raw) - end != item * int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"{path}: payload size does not match shape {shape}")
    data = np.frombuffer(raw, dtype=_DTYPES[dtype], offset=end)
    return data.reshape(shape).astype(np.float32 if dtype == DTYPE_F32 else np.float64)


def _write_sample(root: Path, s: Sample) -> None:
    stem = f"{s.id:06d}"
    meta = {
        "id": s.id,
        "category": s.category,
        "mask": {"has_rgb": s.mask.has_rgb, "has_pc": s.mask.has_pc},
        "label": s.gt.image_label,
        "shape": list(s.shape),
    }
    (root / f"{stem}.json").write_text(json.dumps(meta, indent=1))
    if s.rgb is not None:
        write_tensor(root / f"{stem}_rgb.miid", s.rgb)
    if s.pc is not None:
        write_tensor(root / f"{stem}_xyz.miid", s.pc.coords)
        write_tensor(root / f"{stem}_valid.miid", s.pc.validity)
    write_tensor(root / f"{stem}_gt.miid", s.gt.anomaly_mask)


def _read_sample(root: Path, meta_path: Path) -> Sample:
    meta = json.loads(meta_path.read_text())
    stem = meta_path.stem
    mask = ModalityMask(**meta["mask"])
    rgb = read_tensor(root / f"{stem}_rgb.miid").astype(np.float64) if mask.has_rgb else None
    pc = None
    if mask.has_pc:
        pc = PointGrid(
            read_tensor(root / f"{stem}_xyz.miid").astype(np.float64),
            read_tensor(root / f"{stem}_valid.miid") > 0.5,
        )
    gt = GroundTruth(read_tensor(root / f"{stem}_gt.miid") > 0.5)
    if gt.image_label != meta["label"]:
        raise FormatError(f"{meta_path}: label does not match the stored mask")
    return Sample(rgb, pc, gt, mask, meta["category"], int(meta["id"]))


def save_dataset(ds: MiiadDataset, out: str | Path) -> Path:
    out = Path(out)
    for split, samples in (("train", ds.train), ("test", ds.test)):
        root = out / split
        root.mkdir(parents=True, exist_ok=True)
        for s in samples:
            _write_sample(root, s)
    (out / "dataset.json").write_text(json.dumps({"categories": list(ds.categories)}))
    return out


def load_dataset(path: str | Path) -> MiiadDataset:
    path = Path(path)
    index = path / "dataset.json"
    if not index.exists():
        raise FileNotFoundError(f"{path} is not a dataset directory (no dataset.json)")
    categories = tuple(json.loads(index.read_text())["categories"])
    splits = {}
    for split in ("train", "test"):
        root = path / split
        splits[split] = tuple(_read_sample(root, p) for p in sorted(root.glob("*.json")))
    return MiiadDataset(splits["train"], splits["test"], categories)
