"""Stage 2: real/pseudo hybrid attention, memory repositories and the final decision.

Tokens that come from a genuinely observed modality form the *real* group,
tokens computed from an all-ones placeholder form the *pseudo* group. A
single attention layer mixes tokens only within their own group; the real
group is supervised with the sample's own targets, the pseudo group with
labels averaged over epochs from the real group's predictions.

Per-patch features then go to three nearest-neighbour repositories (pc, rgb,
fused). Their image-level scores are fused by a Mahalanobis distance and
their patch-level score vectors by a one-class SVM.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.kernel_approximation import Nystroem
from sklearn.linear_model import SGDOneClassSVM
from sklearn.svm import OneClassSVM
from torch import nn

from .blocks import seeded
from .data import ModalityMask
from .fusion import select_instruction

log = logging.getLogger(__name__)

REPOSITORIES = ("pc", "rgb", "fs")


# ---------------------------------------------------------------------------
# masked attention


def masked_attention_weights(q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax of ``q k^T / sqrt(D)`` restricted to entries where ``mask`` is true.

    Masked entries are exactly zero. Rows are stabilized by subtracting the
    maximum over their permitted entries.
    """
    mask = mask.bool()
    if not mask.any(dim=-1).all():
        raise ValueError("every query needs at least one permitted key")
    logits = q @ k.transpose(-1, -2) / np.sqrt(k.shape[-1])
    logits = logits.masked_fill(~mask, float("-inf"))
    logits = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.exp(logits)
    return weights / weights.sum(dim=-1, keepdim=True)


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return masked_attention_weights(q, k, mask) @ v


# ---------------------------------------------------------------------------
# group assignment and supervision


@dataclass(frozen=True)
class GroupAssignment:
    pseudo: np.ndarray  # per-token bool, True = pseudo group

    @property
    def mask(self) -> np.ndarray:
        """``I[i, j]`` is true when tokens ``i`` and ``j`` are in the same group."""
        return self.pseudo[:, None] == self.pseudo[None, :]


def assign_groups(mask: ModalityMask, n_pc: int, n_rgb: int) -> GroupAssignment:
    """Tokens derived from a ones-filled modality are pseudo, all others real."""
    pseudo = np.concatenate([np.full(n_pc, not mask.has_pc), np.full(n_rgb, not mask.has_rgb)])
    return GroupAssignment(pseudo)


@dataclass
class PseudoLabelStore:
    """Running mean over epochs of each sample's unimodal (real-group) predictions."""

    probs: dict[int, np.ndarray] = field(default_factory=dict)
    regs: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def __contains__(self, key: int) -> bool:
        return key in self.counts

    def update(self, predictions: dict[int, tuple[np.ndarray, np.ndarray]]) -> "PseudoLabelStore":
        for key, (prob, reg) in predictions.items():
            n = self.counts.get(key, 0)
            if n == 0:
                p, r = np.asarray(prob, dtype=np.float64), np.asarray(reg, dtype=np.float64)
            else:
                p = (self.probs[key] * n + prob) / (n + 1)
                r = (self.regs[key] * n + reg) / (n + 1)
            self.probs[key] = p / p.sum()
            self.regs[key] = r
            self.counts[key] = n + 1
        return self


class HybridLayer(nn.Module):
    """One transformer layer with group-masked single-head attention and two heads."""

    def __init__(self, dim: int, n_classes: int = 3, mlp_ratio: float = 2.0, layer_scale: float | None = None):
        super().__init__()
        # learnable per-channel gains on both residual branches (LayerScale); None = plain residuals
        self.gamma1 = nn.Parameter(torch.full((dim,), layer_scale)) if layer_scale is not None else None
        self.gamma2 = nn.Parameter(torch.full((dim,), layer_scale)) if layer_scale is not None else None
        self.norm1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.classifier = nn.Linear(dim, n_classes)
        self.regressor = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        a = self.o(masked_attention(self.q(h), self.k(h), self.v(h), mask))
        x = x + (a if self.gamma1 is None else self.gamma1 * a)
        m = self.mlp(self.norm2(x))
        return x + (m if self.gamma2 is None else self.gamma2 * m)

    def heads(self, tokens: torch.Tensor, select: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Pool the selected tokens of each sample; return (logits, regression, has_any)."""
        w = select.float()
        n = w.sum(1, keepdim=True)
        pooled = (tokens * w[..., None]).sum(1) / n.clamp(min=1)
        return self.classifier(pooled), self.regressor(pooled), n[:, 0] > 0


def hybrid_losses(
    real_logits: torch.Tensor,
    real_reg: torch.Tensor,
    pseudo_logits: torch.Tensor,
    pseudo_reg: torch.Tensor,
    class_target: torch.Tensor,
    reg_target: torch.Tensor,
    pseudo_prob: torch.Tensor,
    pseudo_reg_target: torch.Tensor,
    real_present: torch.Tensor,
    pseudo_present: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """``L_real`` = CE + L2 on the real group; ``L_pseudo`` = KL + L2 on the pseudo group.

    Samples whose group is empty (or that have no stored pseudo-label yet)
    are excluded; an empty selection contributes zero.
    """
    zero = real_logits.sum() * 0.0
    l_real = zero
    if real_present.any():
        m = real_present
        l_real = F.cross_entropy(real_logits[m], class_target[m]) + F.mse_loss(real_reg[m], reg_target[m])
    l_pseudo = zero
    if pseudo_present.any():
        m = pseudo_present
        log_q = F.log_softmax(pseudo_logits[m], dim=-1)
        kl = F.kl_div(log_q, pseudo_prob[m], reduction="batchmean")
        l_pseudo = kl + F.mse_loss(pseudo_reg[m], pseudo_reg_target[m])
    return l_real, l_pseudo


@dataclass
class HybridConfig:
    mlp_ratio: float = 2.0
    layer_scale: float | None = 0.1
    lambda_pseudo: float = 1.0
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 16
    seed: int = 0
    use_rphd: bool = True
    coreset_fraction: float = 1.0
    phi_neighbors: int = 9
    eta: str = "patchcore"
    ocsvm_mode: str = "sgd"
    ocsvm_nu: float = 0.5
    ocsvm_gamma: float | None = None
    ocsvm_lr: float = 1e-4
    ocsvm_epochs: int = 200
    ocsvm_components: int = 256
    ocsvm_max_patches: int = 4096
    ocsvm_standardize: bool = True
    mdm_reg: float = 1e-6


@dataclass
class Stage2History:
    epoch_losses: list[float] = field(default_factory=list)
    real_losses: list[float] = field(default_factory=list)
    pseudo_losses: list[float] = field(default_factory=list)


def _group_mask(pseudo: torch.Tensor) -> torch.Tensor:
    return pseudo[:, :, None] == pseudo[:, None, :]


def train_stage2(layer: HybridLayer, tokens: np.ndarray, pseudo: np.ndarray, masks: list[ModalityMask],
                 reg_targets: np.ndarray, cfg: HybridConfig) -> tuple[Stage2History, PseudoLabelStore]:
    """Train the hybrid layer on frozen stage-1 tokens.

    ``tokens``: ``N x L x d`` concatenated ``[g_pc | g_rgb]``; ``pseudo``:
    ``N x L`` group flags; ``reg_targets``: ``N x d`` (mean fused token).
    """
    x = torch.as_tensor(tokens, dtype=torch.float32)
    ps = torch.as_tensor(pseudo, dtype=torch.bool)
    cls = torch.as_tensor([select_instruction(m) for m in masks])
    reg = torch.as_tensor(reg_targets, dtype=torch.float32)
    store = PseudoLabelStore()
    hist = Stage2History()
    opt = torch.optim.AdamW(layer.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    n, d = len(x), x.shape[-1]
    layer.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        sums = np.zeros(3)
        predictions = {}
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out = layer(x[idx], _group_mask(ps[idx]))
            r_logits, r_reg, r_has = layer.heads(out, ~ps[idx])
            p_logits, p_reg, p_has = layer.heads(out, ps[idx])
            stored = torch.tensor([int(i) in store for i in idx])
            p_prob = torch.stack([
                torch.as_tensor(store.probs[int(i)], dtype=torch.float32) if int(i) in store else torch.full((3,), 1 / 3)
                for i in idx
            ])
            p_reg_t = torch.stack([
                torch.as_tensor(store.regs[int(i)], dtype=torch.float32) if int(i) in store else torch.zeros(d)
                for i in idx
            ])
            l_real, l_pseudo = hybrid_losses(r_logits, r_reg, p_logits, p_reg, cls[idx], reg[idx],
                                             p_prob, p_reg_t, r_has, p_has & stored)
            loss = l_real + cfg.lambda_pseudo * l_pseudo
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += np.array([loss.item(), l_real.item(), l_pseudo.item()]) * len(idx)
            probs = torch.softmax(r_logits, -1).detach().double().numpy()
            regs = r_reg.detach().double().numpy()
            for j, i in enumerate(idx.tolist()):
                if bool(r_has[j]):
                    predictions[i] = (probs[j], regs[j])
        store.update(predictions)
        hist.epoch_losses.append(sums[0] / n)
        hist.real_losses.append(sums[1] / n)
        hist.pseudo_losses.append(sums[2] / n)
        log.debug("stage2 epoch %d loss %.4f", epoch, hist.epoch_losses[-1])
    layer.eval()
    return hist, store


@torch.no_grad()
def apply_hybrid(layer: HybridLayer, tokens: np.ndarray, pseudo: np.ndarray) -> np.ndarray:
    x = torch.as_tensor(tokens, dtype=torch.float32)
    ps = torch.as_tensor(pseudo, dtype=torch.bool)
    return layer(x, _group_mask(ps)).double().numpy()


def make_hybrid_layer(dim: int, cfg: HybridConfig) -> HybridLayer:
    with seeded(cfg.seed + 303):
        return HybridLayer(dim, 3, cfg.mlp_ratio, cfg.layer_scale)


# ---------------------------------------------------------------------------
# memory repositories and PatchCore-style scoring


@dataclass
class MemoryRepository:
    """Bank of per-patch features with provenance (sample id, token index, pseudo flag)."""

    modality: str
    bank: np.ndarray
    sample_ids: np.ndarray
    token_ids: np.ndarray
    pseudo: np.ndarray

    def __post_init__(self):
        if len(self.bank) == 0:
            raise ValueError(f"repository R_{self.modality} is empty")

    def __len__(self) -> int:
        return len(self.bank)

    def distances(self, f: np.ndarray, exclude_sample: int | None = None) -> np.ndarray:
        """``len(f) x len(bank)`` Euclidean distances; own-sample rows set to inf."""
        d2 = (f ** 2).sum(1)[:, None] + (self.bank ** 2).sum(1)[None, :] - 2 * f @ self.bank.T
        d = np.sqrt(np.clip(d2, 0, None))
        if exclude_sample is not None:
            d[:, self.sample_ids == exclude_sample] = np.inf
        return d

    def coreset(self, fraction: float, seed: int = 0) -> "MemoryRepository":
        if fraction >= 1.0:
            return self
        n = max(1, int(round(fraction * len(self))))
        start = int(np.random.default_rng(seed).integers(len(self)))
        keep = kcenter_greedy(self.bank, n, start)
        return MemoryRepository(self.modality, self.bank[keep], self.sample_ids[keep], self.token_ids[keep], self.pseudo[keep])


def kcenter_greedy(x: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset (the PatchCore coreset), ties to the lowest index."""
    chosen = [start]
    dist = np.linalg.norm(x - x[start], axis=1)
    dist[start] = -1
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(x - x[nxt], axis=1))
        dist[chosen] = -1
    return np.asarray(chosen)


@dataclass
class SampleFeatures:
    """Per-sample stage output: token features of each stream plus provenance."""

    id: int
    mask: ModalityMask
    g_pc: np.ndarray
    g_rgb: np.ndarray
    g_fs: np.ndarray

    def stream(self, name: str) -> np.ndarray:
        return {"pc": self.g_pc, "rgb": self.g_rgb, "fs": self.g_fs}[name]


def build_repositories(train: list[SampleFeatures], coreset_fraction: float = 1.0,
                       seed: int = 0) -> dict[str, MemoryRepository]:
    """R_pc / R_rgb take only genuinely observed modalities; R_fs takes every sample."""
    repos = {}
    for name in REPOSITORIES:
        rows, sids, tids, pseudo = [], [], [], []
        for s in train:
            if (name == "pc" and not s.mask.has_pc) or (name == "rgb" and not s.mask.has_rgb):
                continue
            f = s.stream(name)
            rows.append(f)
            sids.append(np.full(len(f), s.id))
            tids.append(np.arange(len(f)))
            pseudo.append(np.full(len(f), not s.mask.complete if name == "fs" else False))
        if not rows:
            raise ValueError(f"repository R_{name} would be empty: no training sample observes that modality")
        repo = MemoryRepository(name, np.concatenate(rows), np.concatenate(sids), np.concatenate(tids), np.concatenate(pseudo))
        repos[name] = repo.coreset(coreset_fraction, seed)
    return repos


def score_psi(repo: MemoryRepository, f: np.ndarray, exclude_sample: int | None = None) -> np.ndarray:
    """Per-patch distance to the nearest bank row."""
    return repo.distances(f, exclude_sample).min(axis=1)


def _parse_eta(eta: str) -> float | None:
    if eta == "patchcore":
        return None
    if eta.startswith("constant:"):
        return float(eta.split(":", 1)[1])
    raise ValueError(f"unknown eta setting {eta!r}")


def score_phi(repo: MemoryRepository, f: np.ndarray, b: int = 9, eta: str = "patchcore",
              exclude_sample: int | None = None) -> float:
    """Re-weighted distance of the most anomalous patch to its nearest memory."""
    d = repo.distances(f, exclude_sample)
    nearest = d.min(axis=1)
    star = int(np.argmax(nearest))
    s_star = float(nearest[star])
    weight = _parse_eta(eta)
    if weight is None:
        row = np.sort(d[star][np.isfinite(d[star])])[:b]
        # 1 - softmax over the b nearest distances, taken at the nearest one
        weight = 1.0 - float(np.exp(row[0] - np.logaddexp.reduce(row)))
    return weight * s_star


def score_sample(repos: dict[str, MemoryRepository], s: SampleFeatures, b: int = 9, eta: str = "patchcore",
                 exclude_self: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Return (3 image scores, L x 3 patch score vectors) in ``REPOSITORIES`` order."""
    ex = s.id if exclude_self else None
    image = np.array([score_phi(repos[n], s.stream(n), b, eta, ex) for n in REPOSITORIES])
    patches = np.stack([score_psi(repos[n], s.stream(n), ex) for n in REPOSITORIES], axis=1)
    return image, patches


# ---------------------------------------------------------------------------
# decision fusion


@dataclass
class MahalanobisModel:
    mean: np.ndarray
    cov: np.ndarray
    precision: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, reg: float = 1e-6) -> "MahalanobisModel":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        cov = np.atleast_2d(np.cov(x, rowvar=False))
        dim = cov.shape[0]
        trace = float(np.trace(cov))
        lam = reg * trace / dim
        if trace <= 0 or not np.isfinite(trace):
            warnings.warn("degenerate training score vectors; using an isotropic covariance", RuntimeWarning)
            cov = np.zeros_like(cov)
            lam = reg if reg > 0 else 1e-12
        cov = cov + lam * np.eye(dim)
        return cls(mean, cov, np.linalg.inv(cov))

    def distance(self, x: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(x) - self.mean
        return np.sqrt(np.clip(np.einsum("ni,ij,nj->n", d, self.precision, d), 0, None))


@dataclass
class OneClassModel:
    """RBF one-class SVM in kernel-expansion form: ``f(x) = sum_i c_i k(u, s_i) - rho``.

    ``u = (x - loc) / scale`` is the input after the per-column standardization
    fitted on the training vectors (identity when ``loc = 0``, ``scale = 1``).
    """

    support: np.ndarray
    coef: np.ndarray
    gamma: float
    rho: float
    nu: float
    loc: np.ndarray | None = None
    scale: np.ndarray | None = None

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.loc is not None:
            x = (x - self.loc) / self.scale
        return x

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = self.standardize(x)
        d2 = (x ** 2).sum(1)[:, None] + (self.support ** 2).sum(1)[None, :] - 2 * x @ self.support.T
        k = np.exp(-self.gamma * np.clip(d2, 0, None))
        return k @ self.coef - self.rho

    def score(self, x: np.ndarray) -> np.ndarray:
        """Anomaly score, larger = more anomalous."""
        return -self.decision_function(x)


def fit_ocsvm(x: np.ndarray, nu: float = 0.5, gamma: float | None = None, mode: str = "sgd",
              lr: float = 1e-4, epochs: int = 200, components: int = 256, seed: int = 0,
              standardize: bool = True) -> OneClassModel:
    """Fit an RBF one-class SVM, either exactly (libsvm) or by SGD on a Nystroem map.

    With ``standardize`` each column is centered and scaled to unit variance
    first, so a column with a wide spread does not flatten the kernel for the
    others. ``gamma`` defaults to ``1 / (n_features * var)`` of the (possibly
    standardized) data.
    """
    x = np.asarray(x, dtype=np.float64)
    loc = scale = None
    if standardize:
        loc = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        x = (x - loc) / scale
    if gamma is None:
        var = x.var()
        gamma = 1.0 / (x.shape[1] * var) if var > 0 else 1.0
    if mode == "exact":
        svm = OneClassSVM(kernel="rbf", nu=nu, gamma=gamma).fit(x)
        return OneClassModel(svm.support_vectors_.copy(), svm.dual_coef_[0].copy(), gamma,
                             float(svm.offset_[0]), nu, loc, scale)
    if mode != "sgd":
        raise ValueError(f"unknown OCSVM mode {mode!r}")
    feat = Nystroem(kernel="rbf", gamma=gamma, n_components=min(components, len(x)), random_state=seed).fit(x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # ConvergenceWarning at a fixed epoch budget
        sgd = SGDOneClassSVM(nu=nu, learning_rate="constant", eta0=lr, max_iter=epochs, tol=None,
                             random_state=seed).fit(feat.transform(x))
    coef = feat.normalization_.T @ sgd.coef_
    return OneClassModel(feat.components_.copy(), coef, gamma, float(sgd.offset_[0]), nu, loc, scale)


@dataclass
class DecisionModels:
    mdm: MahalanobisModel
    ocsvm: OneClassModel


def fit_decision(image_scores: np.ndarray, patch_vectors: np.ndarray, cfg: HybridConfig | None = None,
                 seed: int = 0) -> DecisionModels:
    cfg = cfg or HybridConfig()
    if len(image_scores) < 4:
        raise ValueError("need at least 4 training samples to fit the decision models")
    mdm = MahalanobisModel.fit(image_scores, cfg.mdm_reg)
    rng = np.random.default_rng(seed)
    if len(patch_vectors) > cfg.ocsvm_max_patches:
        patch_vectors = patch_vectors[rng.choice(len(patch_vectors), cfg.ocsvm_max_patches, replace=False)]
    svm = fit_ocsvm(patch_vectors, cfg.ocsvm_nu, cfg.ocsvm_gamma, cfg.ocsvm_mode, cfg.ocsvm_lr,
                    cfg.ocsvm_epochs, cfg.ocsvm_components, seed, cfg.ocsvm_standardize)
    return DecisionModels(mdm, svm)


@dataclass
class AnomalyResult:
    sco_a: float
    seg_m: np.ndarray  # rows x cols (patch resolution)
    seg_pixels: np.ndarray  # H x W


def upsample_nearest(seg: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows, cols = seg.shape
    return np.repeat(np.repeat(seg, shape[0] // rows, axis=0), shape[1] // cols, axis=1)


def decide(models: DecisionModels, image_scores: np.ndarray, patch_vectors: np.ndarray,
           grid: tuple[int, int], pixel_shape: tuple[int, int] | None = None) -> AnomalyResult:
    sco = float(models.mdm.distance(image_scores)[0])
    seg = models.ocsvm.score(patch_vectors).reshape(grid)
    pixels = upsample_nearest(seg, pixel_shape) if pixel_shape is not None else seg
    return AnomalyResult(sco, seg, pixels)
