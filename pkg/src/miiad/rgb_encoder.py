"""Image branch: patch embedding plus a small ViT with tapped block outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .blocks import Block, resolve_taps, seeded


@dataclass
class RgbEncoderConfig:
    dim: int = 48
    heads: int = 2
    depth: int = 3
    image_size: int = 32
    taps: tuple[int, ...] | None = None
    branch_scale: float = 0.1
    seed: int = 1


class PatchEmbed(nn.Module):
    def __init__(self, patch: int, dim: int, grid: tuple[int, int]):
        super().__init__()
        self.patch = patch
        self.grid = grid
        self.proj = nn.Linear(patch * patch * 3, dim)
        self.pos = nn.Parameter(torch.randn(grid[0] * grid[1], dim) * 0.02)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """``img``: B x H x W x 3 -> B x L x dim (row-major patch order)."""
        b, h, w, c = img.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"patch {p} does not divide image {h}x{w}")
        if (h // p, w // p) != self.grid:
            raise ValueError(f"image grid {(h // p, w // p)} does not match embedding grid {self.grid}")
        x = img.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5).reshape(b, -1, p * p * c)
        return self.proj(x) + self.pos


class RgbEncoder(nn.Module):
    def __init__(self, cfg: RgbEncoderConfig | None = None, patch: int = 4):
        super().__init__()
        self.cfg = cfg = cfg or RgbEncoderConfig()
        self.patch = patch
        grid = (cfg.image_size // patch, cfg.image_size // patch)
        with seeded(cfg.seed):
            self.embed = PatchEmbed(patch, cfg.dim, grid)
            self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, branch_scale=cfg.branch_scale) for _ in range(cfg.depth))
        self.taps = resolve_taps(cfg.taps, cfg.depth)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def out_dim(self) -> int:
        return self.cfg.dim * len(self.taps)

    def patchify(self, img: torch.Tensor) -> torch.Tensor:
        return self.embed(img)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        outs = []
        x = tokens
        for blk in self.blocks:
            x = blk(x)
            outs.append(x)
        return torch.cat([outs[i] for i in self.taps], dim=-1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        b = img.shape[0]
        rows, cols = self.embed.grid
        return self.encode(self.patchify(img)).reshape(b, rows, cols, -1)

    @torch.no_grad()
    def features(self, rgb: np.ndarray) -> np.ndarray:
        """RgbImage (H x W x 3) -> (H/patch) x (W/patch) x d_out."""
        out = self(torch.as_tensor(rgb, dtype=torch.float32)[None])
        return out[0].double().numpy()
