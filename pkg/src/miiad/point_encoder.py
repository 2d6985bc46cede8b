"""Point-cloud branch: FPS grouping, group tokens, interpolation, grid pooling.

The grid of valid points is split into ``M`` local groups around farthest-point
centers. Each group becomes one token (mini-PointNet + max-pool), the tokens
pass through a small encoder/decoder transformer, and the group features are
spread back onto every point by inverse-distance weights before being averaged
into patch cells that line up with the image tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .blocks import Block, resolve_taps, seeded
from .data import PointGrid


@dataclass(frozen=True)
class PointSet:
    points: np.ndarray  # N x 3
    origins: np.ndarray  # N x 2 (row, col)

    @classmethod
    def from_grid(cls, pc: PointGrid) -> "PointSet":
        rows, cols = np.nonzero(pc.validity)
        return cls(pc.coords[rows, cols].astype(np.float64), np.stack([rows, cols], axis=1))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class GroupSet:
    centers: np.ndarray  # M x 3
    center_index: np.ndarray  # M
    members: np.ndarray  # M x k point indices
    local: np.ndarray  # M x k x 3, member coords minus their center

    @property
    def group_size(self) -> int:
        return self.members.shape[1]


def fps(points: np.ndarray, m: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Farthest point sampling; returns ``m`` distinct indices in selection order.

    The first index is ``start`` or a seeded uniform draw. Ties in the
    max-min distance go to the lowest index.
    """
    n = len(points)
    if not 1 <= m <= n:
        raise ValueError(f"cannot select {m} centers from {n} points")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    dist[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
        dist[chosen[: i + 1]] = -1.0
    return chosen


def group_knn(points: np.ndarray, center_index: np.ndarray, k: int) -> GroupSet:
    if k < 1:
        raise ValueError("group size must be >= 1")
    centers = points[center_index]
    d = np.linalg.norm(centers[:, None, :] - points[None, :, :], axis=2)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    if order.shape[1] < k:
        # fewer points than k: pad each group with its nearest point
        pad = np.repeat(order[:, :1], k - order.shape[1], axis=1)
        order = np.concatenate([order, pad], axis=1)
    local = points[order] - centers[:, None, :]
    return GroupSet(centers, np.asarray(center_index), order, local)


def interpolation_weights(points: np.ndarray, centers: np.ndarray, epsilon: float = 1e-8,
                          mode: str = "normalized", neighbors: int = 0) -> np.ndarray:
    """Inverse-distance weights ``alpha[j, i]`` of center ``i`` for point ``j``.

    ``normalized`` divides by the per-point sum so each row is a convex
    combination; with ``neighbors > 0`` only that many nearest centers get a
    nonzero weight. ``literal`` divides by the sum over all centers *and*
    points, which makes the rows sum to less than one; it ignores
    ``neighbors``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    dist = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    inv = 1.0 / (dist + epsilon)
    if mode == "normalized":
        if 0 < neighbors < len(centers):
            far = np.argsort(dist, axis=1, kind="stable")[:, neighbors:]
            np.put_along_axis(inv, far, 0.0, axis=1)
        return inv / inv.sum(axis=1, keepdims=True)
    if mode == "literal":
        return inv / inv.sum()
    raise ValueError(f"unknown interpolation mode {mode!r}")


def interpolate_features(points: np.ndarray, centers: np.ndarray, features: np.ndarray,
                         epsilon: float = 1e-8, mode: str = "normalized", neighbors: int = 0) -> np.ndarray:
    return interpolation_weights(points, centers, epsilon, mode, neighbors) @ features


def nearest_center_features(points: np.ndarray, centers: np.ndarray, features: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    return features[np.argmin(d, axis=1)]


def project_to_grid(features: np.ndarray, origins: np.ndarray, grid: tuple[int, int], patch: int,
                    min_points: int = 1) -> np.ndarray:
    """Average per-point features into ``patch x patch`` cells.

    Cells holding fewer than ``min_points`` points are treated as empty and
    set to zero; sparse cells on the object rim are otherwise dominated by
    the few points that happen to survive plane removal.
    """
    h, w = grid
    if h % patch or w % patch:
        raise ValueError(f"patch {patch} does not divide grid {grid}")
    rows, cols = h // patch, w // patch
    d = features.shape[1]
    cell = (origins[:, 0] // patch) * cols + origins[:, 1] // patch
    sums = np.zeros((rows * cols, d))
    np.add.at(sums, cell, features)
    counts = np.bincount(cell, minlength=rows * cols)[:, None]
    out = np.divide(sums, counts, out=np.zeros_like(sums), where=counts >= max(min_points, 1))
    return out.reshape(rows, cols, d)


@dataclass
class PointEncoderConfig:
    dim: int = 48
    heads: int = 2
    enc_depth: int = 2
    dec_depth: int = 1
    num_groups: int = 64
    group_size: int = 16
    taps: tuple[int, ...] | None = None
    epsilon: float = 1e-8
    interp: str = "normalized"
    # nearest centers used per point by the normalized interpolation; 0 = all
    interp_neighbors: int = 3
    coord_scale: float = 5.0
    local_scale: float = 300.0
    branch_scale: float = 0.1
    min_cell_points: int = 8
    seed: int = 0


class GroupEncoder(nn.Module):
    """Group tokens -> encoder stack (``T_en``) -> decoder stack (``T``)."""

    def __init__(self, cfg: PointEncoderConfig):
        super().__init__()
        self.cfg = cfg
        with seeded(cfg.seed):
            self.embed = nn.Sequential(nn.Linear(3, 32), nn.GELU(), nn.Linear(32, 64), nn.GELU(), nn.Linear(64, cfg.dim))
            self.pos = nn.Sequential(nn.Linear(3, 32), nn.GELU(), nn.Linear(32, cfg.dim))
            self.encoder = nn.ModuleList(Block(cfg.dim, cfg.heads, branch_scale=cfg.branch_scale)
                                         for _ in range(cfg.enc_depth))
            self.decoder = nn.ModuleList(Block(cfg.dim, cfg.heads, branch_scale=cfg.branch_scale)
                                         for _ in range(cfg.dec_depth))
        self.taps = resolve_taps(cfg.taps, cfg.enc_depth + cfg.dec_depth)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def out_dim(self) -> int:
        return self.cfg.dim * len(self.taps)

    def forward(self, local: torch.Tensor, centers: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``local``: B x M x k x 3, ``centers``: B x M x 3 -> (tapped T, T_en)."""
        tokens = self.embed(local * self.cfg.local_scale).max(dim=2).values
        x = tokens + self.pos(centers * self.cfg.coord_scale)
        outs = []
        for blk in self.encoder:
            x = blk(x)
            outs.append(x)
        t_en = x
        for blk in self.decoder:
            x = blk(x)
            outs.append(x)
        return torch.cat([outs[i] for i in self.taps], dim=-1), t_en


class PointEncoder:
    """PointGrid -> (H/patch) x (W/patch) x d_out feature grid."""

    def __init__(self, cfg: PointEncoderConfig | None = None, patch: int = 4, extras: bool = True):
        self.cfg = cfg or PointEncoderConfig()
        self.patch = patch
        self.extras = extras
        self.net = GroupEncoder(self.cfg).eval()

    @property
    def out_dim(self) -> int:
        return self.net.out_dim

    def groups(self, ps: PointSet, seed: int = 0) -> GroupSet:
        m = min(self.cfg.num_groups, len(ps))
        return group_knn(ps.points, fps(ps.points, m, seed), self.cfg.group_size)

    @torch.no_grad()
    def encode_groups(self, gs: GroupSet) -> np.ndarray:
        local = torch.as_tensor(gs.local, dtype=torch.float32)[None]
        centers = torch.as_tensor(gs.centers, dtype=torch.float32)[None]
        feats, _ = self.net(local, centers)
        return feats[0].double().numpy()

    def __call__(self, pc: PointGrid, seed: int = 0) -> np.ndarray:
        h, w = pc.shape
        ps = PointSet.from_grid(pc)
        if len(ps) == 0:
            return np.zeros((h // self.patch, w // self.patch, self.out_dim))
        ps = PointSet(ps.points - ps.points.mean(axis=0), ps.origins)
        gs = self.groups(ps, seed)
        feats = self.encode_groups(gs)
        if self.extras:
            per_point = interpolate_features(ps.points, gs.centers, feats, self.cfg.epsilon, self.cfg.interp,
                                             self.cfg.interp_neighbors)
        else:
            per_point = nearest_center_features(ps.points, gs.centers, feats)
        return project_to_grid(per_point, ps.origins, (h, w), self.patch, self.cfg.min_cell_points)
