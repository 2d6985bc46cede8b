"""Small transformer building blocks shared by the encoders and the fusion model."""

from __future__ import annotations

import contextlib

import torch
import torch.nn.functional as F
from torch import nn


@contextlib.contextmanager
def seeded(seed: int):
    """Run parameter initialization under a private, seeded torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class Block(nn.Module):
    """Pre-norm transformer block (multi-head self-attention + GELU MLP).

    ``branch_scale`` multiplies both residual branches by a fixed constant; a
    small value keeps a randomly initialized frozen stack close to the
    identity so that tokens keep their own content.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, branch_scale: float = 1.0):
        super().__init__()
        self.branch_scale = branch_scale
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        if attn_mask is not None and attn_mask.ndim == 3:
            attn_mask = attn_mask[:, None]
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        x = x + self.branch_scale * self.proj(y.transpose(1, 2).reshape(b, n, d))
        return x + self.branch_scale * self.mlp(self.norm2(x))


def resolve_taps(taps, depth: int) -> list[int]:
    """Map 1-based (or negative) block numbers to 0-based indices; ``None`` taps every block."""
    if taps is None:
        return list(range(depth))
    out = []
    for t in taps:
        idx = t - 1 if t > 0 else depth + t
        if not 0 <= idx < depth:
            raise ValueError(f"tap {t} outside a {depth}-block stack")
        out.append(idx)
    return out


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
