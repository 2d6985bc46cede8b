"""Stage 1: instruction-conditioned fusion with hypernetwork-generated projections.

Token layout for one sample is ``[f_pc tokens | f_rgb tokens]``. For every
block inside ``instr_layers`` the block selected by the sample's modality
pattern is prepended, the block runs, and the instruction positions are
dropped again before the next block. The fused sequence is then split back
into its two halves and each half goes through a two-layer MLP whose weights
come from a hypernetwork.

Only the instruction tokens and the hypernetwork are trained; the adapters
and the fusion transformer stay frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import Block, count_parameters, seeded
from .data import ModalityMask

log = logging.getLogger(__name__)

# instruction block per modality pattern
I_PC, I_RGB, I_COMPLETE = 0, 1, 2


def select_instruction(mask: ModalityMask) -> int:
    """pc missing -> ``I_PC``; rgb missing -> ``I_RGB``; complete -> ``I_COMPLETE``."""
    if not mask.has_pc:
        return I_PC
    if not mask.has_rgb:
        return I_RGB
    return I_COMPLETE


def prepend_instruction(instr: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """``concat(instr; h)`` along the token axis (works batched or unbatched)."""
    if instr.shape[-1] != h.shape[-1]:
        raise ValueError(f"instruction width {instr.shape[-1]} != token width {h.shape[-1]}")
    return torch.cat([instr, h], dim=-2)


@dataclass
class FusionConfig:
    width: int = 64
    depth: int = 4
    heads: int = 4
    instr_len: int = 16
    instr_layers: tuple[int, int] = (0, 3)
    keep_instructions: bool = False
    branch_scale: float = 0.1
    # generated MLPs: width -> mlp_hidden -> out_dim
    mlp_hidden: int = 32
    out_dim: int = 64
    activation: str = "gelu"
    # g = f_hat + residual * MLP(f_hat) when set; plain g = MLP(f_hat) when None
    residual: float | None = 0.1
    # hypernetwork sizes
    z_dim: int = 8
    xi_hidden: int = 4
    embed_dim: int = 4
    hyper_hidden: int = 4
    temperature: float = 0.07
    lr_instr: float = 1e-2
    lr_mlp: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    use_aif: bool = True

    def __post_init__(self):
        start, end = self.instr_layers
        if not 0 <= start <= end < self.depth and self.depth > 0:
            raise ValueError(f"instr_layers {self.instr_layers} outside a depth-{self.depth} transformer")
        if self.residual is not None and self.out_dim != self.width:
            raise ValueError(f"a residual projection needs out_dim == width, got {self.out_dim} != {self.width}")


class InstructionSet(nn.Module):
    """Three learnable blocks of shape ``n_layers x instr_len x width``."""

    def __init__(self, n_layers: int, length: int, width: int):
        super().__init__()
        self.tokens = nn.Parameter(torch.randn(3, n_layers, length, width) * 0.02)

    @property
    def length(self) -> int:
        return self.tokens.shape[2]

    def forward(self, index: torch.Tensor, layer: int) -> torch.Tensor:
        return self.tokens[index, layer]


class FusionTransformer(nn.Module):
    def __init__(self, width: int, depth: int, heads: int, branch_scale: float = 1.0):
        super().__init__()
        self.blocks = nn.ModuleList(Block(width, heads, branch_scale=branch_scale) for _ in range(depth))

    def freeze(self) -> "FusionTransformer":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


@dataclass(frozen=True)
class TargetLayer:
    name: str
    n_in: int
    n_out: int

    @property
    def size(self) -> int:
        return self.n_in * self.n_out + self.n_out


class HyperNetwork(nn.Module):
    """Emits the weights of ``MLP_pc`` and ``MLP_rgb``.

    Per target layer ``n`` the static part ``K = xi(z[n])`` comes from a
    learned layer code through a shared two-layer generator, and the
    input-conditioned part ``w = (W1 enc_n(e) + B1) W2 + B2`` comes from a
    summary ``e`` of the corresponding fused stream. Both are flat vectors of
    length ``n_in * n_out + n_out``; the generator output is sized for the
    largest target and sliced for smaller ones. ``W2``/``B2`` start at zero so
    training begins from the static weights.
    """

    def __init__(self, targets: list[TargetLayer], stream_dim: int, z_dim: int = 8, xi_hidden: int = 4,
                 embed_dim: int = 4, hyper_hidden: int = 4):
        super().__init__()
        self.targets = targets
        size = max(t.size for t in targets)
        self.z = nn.Parameter(torch.randn(len(targets), z_dim))
        self.xi = nn.Sequential(nn.Linear(z_dim, xi_hidden), nn.Tanh(), nn.Linear(xi_hidden, size))
        fan_in = max(t.n_in for t in targets)
        nn.init.normal_(self.xi[2].weight, std=1.0 / np.sqrt(fan_in * xi_hidden * 0.4))
        nn.init.zeros_(self.xi[2].bias)
        self.layer_encoders = nn.ModuleList(nn.Linear(stream_dim, embed_dim) for _ in targets)
        self.head1 = nn.Linear(embed_dim, hyper_hidden)  # W1, B1
        self.head2 = nn.Linear(hyper_hidden, size)  # W2, B2
        nn.init.zeros_(self.head2.weight)
        nn.init.zeros_(self.head2.bias)

    def static_weights(self) -> list[torch.Tensor]:
        """``K[n]`` for every target; depends on ``z`` and the generator only."""
        flat = self.xi(self.z)
        return [flat[i, : t.size] for i, t in enumerate(self.targets)]

    def adaptive_weights(self, summaries: list[torch.Tensor]) -> list[torch.Tensor]:
        """``w[n]`` for a batch: ``summaries[n]`` is ``B x stream_dim``."""
        out = []
        for i, t in enumerate(self.targets):
            e = self.layer_encoders[i](summaries[i])
            out.append(self.head2(self.head1(e))[:, : t.size])
        return out

    def forward(self, summaries: list[torch.Tensor]) -> list[torch.Tensor]:
        static = self.static_weights()
        adaptive = self.adaptive_weights(summaries)
        return [k[None] + w for k, w in zip(static, adaptive)]


def unpack_weights(flat: torch.Tensor, n_in: int, n_out: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Split ``... x (n_in*n_out + n_out)`` into ``(... x n_in x n_out, ... x n_out)``."""
    expected = n_in * n_out + n_out
    if flat.shape[-1] != expected:
        raise ValueError(f"flat weight length {flat.shape[-1]} != {expected} for a {n_in}->{n_out} layer")
    w = flat[..., : n_in * n_out].reshape(*flat.shape[:-1], n_in, n_out)
    return w, flat[..., n_in * n_out:]


def apply_generated_mlp(layers: list[tuple[torch.Tensor, torch.Tensor]], x: torch.Tensor,
                        activation: str = "gelu") -> torch.Tensor:
    """Tokenwise MLP with externally supplied weights.

    ``layers`` holds ``(W, b)`` pairs with ``W: [B x] n_in x n_out``; ``x`` is
    ``[B x] L x n_in``. The activation sits between layers, the last layer is
    linear.
    """
    for i, (w, b) in enumerate(layers):
        if x.shape[-1] != w.shape[-2]:
            raise ValueError(f"layer {i}: input width {x.shape[-1]} != weight rows {w.shape[-2]}")
        x = x @ w + b.unsqueeze(-2)
        if i < len(layers) - 1:
            if activation == "gelu":
                x = F.gelu(x)
            elif activation != "linear":
                raise ValueError(f"unknown activation {activation!r}")
    return x


def infonce_loss(g_pc: torch.Tensor, g_rgb: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Symmetric patch-wise InfoNCE over every token in the batch.

    Token ``t`` of ``g_pc`` and token ``t`` of ``g_rgb`` are the positive pair;
    all other tokens of the other modality are negatives.
    """
    if g_pc.shape != g_rgb.shape:
        raise ValueError(f"shape mismatch {tuple(g_pc.shape)} vs {tuple(g_rgb.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a = F.normalize(g_pc.reshape(-1, g_pc.shape[-1]), dim=-1)
    b = F.normalize(g_rgb.reshape(-1, g_rgb.shape[-1]), dim=-1)
    logits = a @ b.T / temperature
    target = torch.arange(len(a), device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


@dataclass
class FusedStreams:
    f_hat_pc: torch.Tensor
    f_hat_rgb: torch.Tensor
    g_pc: torch.Tensor
    g_rgb: torch.Tensor
    g_fs: torch.Tensor


class Stage1Model(nn.Module):
    """Adapters + frozen fusion transformer + instructions + hypernetwork."""

    def __init__(self, pc_dim: int, rgb_dim: int, cfg: FusionConfig | None = None, backbone_seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or FusionConfig()
        # the frozen part depends on backbone_seed only, the trainable part on cfg.seed
        with seeded(backbone_seed + 101):
            self.pc_adapter = nn.Sequential(nn.LayerNorm(pc_dim, elementwise_affine=False), nn.Linear(pc_dim, cfg.width))
            self.rgb_adapter = nn.Sequential(nn.LayerNorm(rgb_dim, elementwise_affine=False), nn.Linear(rgb_dim, cfg.width))
            self.backbone = FusionTransformer(cfg.width, cfg.depth, cfg.heads, cfg.branch_scale).freeze()
        for p in list(self.pc_adapter.parameters()) + list(self.rgb_adapter.parameters()):
            p.requires_grad_(False)
        start, end = cfg.instr_layers
        self.targets = [
            TargetLayer("pc0", cfg.width, cfg.mlp_hidden),
            TargetLayer("pc1", cfg.mlp_hidden, cfg.out_dim),
            TargetLayer("rgb0", cfg.width, cfg.mlp_hidden),
            TargetLayer("rgb1", cfg.mlp_hidden, cfg.out_dim),
        ]
        with seeded(cfg.seed + 202):
            self.instructions = InstructionSet(end - start + 1, cfg.instr_len, cfg.width)
            self.hyper = HyperNetwork(self.targets, cfg.width, cfg.z_dim, cfg.xi_hidden, cfg.embed_dim, cfg.hyper_hidden)
        if not cfg.use_aif:
            for p in self.trainable_parameters():
                p.requires_grad_(False)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return list(self.instructions.parameters()) + list(self.hyper.parameters())

    def parameter_counts(self) -> dict[str, int]:
        return {
            "instructions": count_parameters(self.instructions),
            "hypernetwork": count_parameters(self.hyper),
            "adapters": count_parameters(self.pc_adapter) + count_parameters(self.rgb_adapter),
            "fusion_backbone": count_parameters(self.backbone),
        }

    def adapt(self, f_pc: torch.Tensor, f_rgb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Feature grids ``B x rows x cols x d`` -> token sequences ``B x L x width``."""
        if f_pc.shape[1:3] != f_rgb.shape[1:3]:
            raise ValueError(f"token grids differ: {tuple(f_pc.shape[1:3])} vs {tuple(f_rgb.shape[1:3])}")
        return self.pc_adapter(f_pc.flatten(1, 2)), self.rgb_adapter(f_rgb.flatten(1, 2))

    def fuse(self, t_pc: torch.Tensor, t_rgb: torch.Tensor, instr_index: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the fusion transformer on ``[t_pc | t_rgb]`` and split the result."""
        n_pc = t_pc.shape[1]
        x = torch.cat([t_pc, t_rgb], dim=1)
        start, end = self.cfg.instr_layers
        use_instr = self.cfg.use_aif and instr_index is not None and self.cfg.instr_len > 0
        prepended = 0
        for j, blk in enumerate(self.backbone.blocks):
            if use_instr and start <= j <= end:
                x = prepend_instruction(self.instructions(instr_index, j - start), x)
                if self.cfg.keep_instructions:
                    prepended += self.cfg.instr_len
                    x = blk(x)
                else:
                    x = blk(x)[:, self.cfg.instr_len:]
            else:
                x = blk(x)
        x = x[:, prepended:]
        return x[:, :n_pc], x[:, n_pc:]

    def project(self, f_hat_pc: torch.Tensor, f_hat_rgb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.cfg.use_aif:
            return f_hat_pc, f_hat_rgb
        summaries = [f_hat_pc.mean(1), f_hat_pc.mean(1), f_hat_rgb.mean(1), f_hat_rgb.mean(1)]
        flat = self.hyper(summaries)
        layers = [unpack_weights(w, t.n_in, t.n_out) for w, t in zip(flat, self.targets)]
        g_pc = apply_generated_mlp(layers[:2], f_hat_pc, self.cfg.activation)
        g_rgb = apply_generated_mlp(layers[2:], f_hat_rgb, self.cfg.activation)
        if self.cfg.residual is not None:
            g_pc = f_hat_pc + self.cfg.residual * g_pc
            g_rgb = f_hat_rgb + self.cfg.residual * g_rgb
        return g_pc, g_rgb

    def forward(self, f_pc: torch.Tensor, f_rgb: torch.Tensor, instr_index: torch.Tensor | None) -> FusedStreams:
        t_pc, t_rgb = self.adapt(f_pc, f_rgb)
        f_hat_pc, f_hat_rgb = self.fuse(t_pc, t_rgb, instr_index)
        g_pc, g_rgb = self.project(f_hat_pc, f_hat_rgb)
        return FusedStreams(f_hat_pc, f_hat_rgb, g_pc, g_rgb, fuse_streams(g_pc, g_rgb))


def fuse_streams(g_pc: torch.Tensor, g_rgb: torch.Tensor) -> torch.Tensor:
    """Fused per-patch feature: the fixed averaging projection of ``[g_pc | g_rgb]``."""
    return 0.5 * (g_pc + g_rgb)


@dataclass
class Stage1History:
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    epoch_losses: list[float] = field(default_factory=list)
    instr_grad_norms: list[float] = field(default_factory=list)


def _batches(n: int, size: int, generator: torch.Generator | None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for i in range(0, n, size):
        yield order[i:i + size]


@torch.no_grad()
def evaluate_infonce(model: Stage1Model, f_pc: torch.Tensor, f_rgb: torch.Tensor, instr: torch.Tensor) -> float:
    cfg = model.cfg
    losses, weights = [], []
    for idx in _batches(len(f_pc), cfg.batch_size, None):
        s = model(f_pc[idx], f_rgb[idx], instr[idx])
        losses.append(float(infonce_loss(s.g_pc, s.g_rgb, cfg.temperature)))
        weights.append(len(idx))
    return float(np.average(losses, weights=weights))


def train_stage1(model: Stage1Model, f_pc: np.ndarray, f_rgb: np.ndarray, masks: list[ModalityMask]) -> Stage1History:
    """Train instructions + hypernetwork with InfoNCE; the backbone stays frozen.

    ``f_pc``/``f_rgb`` are stacked feature grids (``N x rows x cols x d``)
    computed from ones-filled inputs where a modality is missing.
    """
    cfg = model.cfg
    if len(f_pc) == 0:
        raise ValueError("stage 1 needs a non-empty training split")
    f_pc_t = torch.as_tensor(f_pc, dtype=torch.float32)
    f_rgb_t = torch.as_tensor(f_rgb, dtype=torch.float32)
    instr = torch.as_tensor([select_instruction(m) for m in masks])
    hist = Stage1History()
    hist.initial_loss = evaluate_infonce(model, f_pc_t, f_rgb_t, instr)
    if not cfg.use_aif or cfg.epochs == 0:
        hist.final_loss = hist.initial_loss
        return hist
    opt = torch.optim.AdamW(
        [
            {"params": model.instructions.parameters(), "lr": cfg.lr_instr},
            {"params": model.hyper.parameters(), "lr": cfg.lr_mlp},
        ],
        weight_decay=cfg.weight_decay,
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    model.train()
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(f_pc_t), cfg.batch_size, gen):
            s = model(f_pc_t[idx], f_rgb_t[idx], instr[idx])
            loss = infonce_loss(s.g_pc, s.g_rgb, cfg.temperature)
            opt.zero_grad()
            loss.backward()
            grad = model.instructions.tokens.grad
            hist.instr_grad_norms.append(float(grad.norm()) if grad is not None else 0.0)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        hist.epoch_losses.append(total / count)
        log.debug("stage1 epoch %d loss %.4f", epoch, hist.epoch_losses[-1])
    model.eval()
    hist.final_loss = evaluate_infonce(model, f_pc_t, f_rgb_t, instr)
    return hist
