"""Cross-modal geometric alignment.

Every modality is projected onto a shared unit hypersphere, and the heads are
trained so that the parallelotope spanned by an item's modality vectors has
small volume while mismatched (anchor, data) combinations from the same batch
have large volume.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .ingest import EmbeddingCorpus
from .tensorio import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

# below this determinant the volume gradient switches to a truncated pseudo-inverse
DET_FALLBACK = 1e-10
PINV_RTOL = 1e-6


class DegenerateProjectionError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class AlignConfig:
    d: int = 32
    tau: float = 0.07
    anchor_modality: int = 0
    batch_size: int = 64
    lr: float = 1e-2
    steps: int = 300
    seed: int = 0

    def validate(self, n_modalities: int | None = None) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.d < 2:
            raise ValueError("shared dimension d must be >= 2")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size >= 1 and steps >= 0 required")
        if n_modalities is not None and not 0 <= self.anchor_modality < n_modalities:
            raise ValueError(f"anchor modality {self.anchor_modality} out of range")


class ProjectionHead(nn.Module):
    """Linear map ``d_in -> d``; outputs are renormalized onto the unit sphere."""

    def __init__(self, d_in: int, d: int, bias: bool = False, generator: torch.Generator | None = None):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(torch.empty(d, d_in).uniform_(-bound, bound, generator=generator))
        self.bias = nn.Parameter(torch.zeros(d)) if bias else None

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        out = raw @ self.weight.T
        if self.bias is not None:
            out = out + self.bias
        return out / out.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def project(head: ProjectionHead, raw) -> torch.Tensor:
    raw = torch.as_tensor(raw, dtype=head.weight.dtype)
    if raw.shape[-1] != head.weight.shape[1]:
        raise ValueError(f"raw vector has dim {raw.shape[-1]}, head expects {head.weight.shape[1]}")
    out = raw @ head.weight.T
    if head.bias is not None:
        out = out + head.bias
    norm = out.norm(dim=-1, keepdim=True)
    if torch.any(norm < 1e-12):
        raise DegenerateProjectionError("projection has (near) zero norm")
    return out / norm


class _GramVolume(torch.autograd.Function):
    """sqrt(det G) for a batch of symmetric PSD Gram matrices.

    Backward uses d det/dG = det(G) G^{-1}, i.e. dVol/dG = Vol/2 * G^{-1}, and a
    truncated pseudo-inverse where the determinant is tiny.
    """

    @staticmethod
    def forward(ctx, gram):
        det = torch.linalg.det(gram)
        vol = det.clamp_min(0.0).sqrt()
        ctx.save_for_backward(gram, det, vol)
        return vol

    @staticmethod
    def backward(ctx, grad_vol):
        gram, det, vol = ctx.saved_tensors
        small = det < DET_FALLBACK
        inv = torch.empty_like(gram)
        if (~small).any():
            inv[~small] = torch.linalg.inv(gram[~small])
        if small.any():
            inv[small] = torch.linalg.pinv(gram[small], rtol=PINV_RTOL, hermitian=True)
        grad = (0.5 * vol)[..., None, None] * inv.transpose(-1, -2)
        return grad_vol[..., None, None] * grad


def gram_volume(vectors) -> torch.Tensor:
    """Volume of the parallelotope spanned by the rows of ``vectors`` (shape ``(..., k, d)``)."""
    z = torch.as_tensor(vectors)
    if not z.is_floating_point():
        z = z.double()
    gram = z @ z.transpose(-1, -2)
    return _GramVolume.apply(gram)


def volume_matrix(z: torch.Tensor, anchor: int = 0) -> torch.Tensor:
    """``V[k, i] = Vol(a_k, r_i)`` for a batch ``z`` of shape ``(B, N_m, d)``."""
    B, M, _ = z.shape
    a = z[:, anchor]
    rest = torch.cat([z[:, :anchor], z[:, anchor + 1 :]], dim=1)
    sets = torch.cat(
        [a[:, None, None, :].expand(B, B, 1, -1), rest[None, :, :, :].expand(B, B, M - 1, -1)], dim=2
    )
    return gram_volume(sets)


def alignment_loss(z: torch.Tensor, tau: float, anchor: int = 0) -> torch.Tensor:
    """Symmetric volume-contrastive loss over in-batch negatives."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    B = z.shape[0]
    logits = -volume_matrix(z, anchor) / tau
    target = torch.arange(B)
    # data->anchor: normalize over anchors k for each data set i (column-wise)
    d2a = -torch.log_softmax(logits, dim=0)[target, target].mean()
    a2d = -torch.log_softmax(logits, dim=1)[target, target].mean()
    return 0.5 * (d2a + a2d)


@dataclass
class ModalEmbeddingSet:
    item_id: str
    z: torch.Tensor  # (N_m, d)


@dataclass
class AlignedCorpus:
    ids: list[str]
    z: torch.Tensor  # (n_items, N_m, d), unit rows

    def __len__(self) -> int:
        return len(self.ids)

    def item(self, i: int) -> ModalEmbeddingSet:
        return ModalEmbeddingSet(self.ids[i], self.z[i])


@dataclass
class AlignResult:
    heads: nn.ModuleList
    aligned: AlignedCorpus
    curve: list[float] = field(default_factory=list)


def make_heads(dims, cfg: AlignConfig) -> nn.ModuleList:
    gen = torch.Generator().manual_seed(cfg.seed)
    return nn.ModuleList([ProjectionHead(dj, cfg.d, generator=gen) for dj in dims])


def apply_heads(heads: nn.ModuleList, corpus: EmbeddingCorpus) -> AlignedCorpus:
    with torch.no_grad():
        z = torch.stack([project(h, torch.from_numpy(x)) for h, x in zip(heads, corpus.modalities)], dim=1)
    return AlignedCorpus(list(corpus.ids), z)


def train_alignment(corpus: EmbeddingCorpus, cfg: AlignConfig, heads: nn.ModuleList | None = None) -> AlignResult:
    cfg.validate(corpus.n_modalities)
    if len(corpus) == 0:
        raise ValueError("cannot align an empty corpus")
    heads = heads if heads is not None else make_heads(corpus.dims, cfg)
    raw = [torch.from_numpy(x) for x in corpus.modalities]
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = torch.optim.Adam(heads.parameters(), lr=cfg.lr)
    B = min(cfg.batch_size, len(corpus))
    curve = []
    for step in range(cfg.steps):
        idx = torch.randperm(len(corpus), generator=gen)[:B]
        z = torch.stack([h(x[idx]) for h, x in zip(heads, raw)], dim=1)
        loss = alignment_loss(z, cfg.tau, cfg.anchor_modality)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"alignment loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
    canonicalize_signs(heads, raw, cfg.anchor_modality)
    if curve:
        log.info("alignment: %d steps, loss %.4f -> %.4f", cfg.steps, curve[0], curve[-1])
    return AlignResult(heads, apply_heads(heads, corpus), curve)


def canonicalize_signs(heads: nn.ModuleList, raw: list[torch.Tensor], anchor: int) -> None:
    """Flip any head whose outputs point against the anchor modality on average.

    Gram volumes ignore the sign of each vector, so the contrastive loss is
    unchanged, but downstream fusion needs co-directional modalities.
    """
    with torch.no_grad():
        za = heads[anchor](raw[anchor])
        for j, (h, x) in enumerate(zip(heads, raw)):
            if j != anchor and (h(x) * za).sum(-1).mean() < 0:
                h.weight.neg_()
                if h.bias is not None:
                    h.bias.neg_()


def matched_vs_mismatched_volume(aligned: AlignedCorpus, anchor: int = 0, n: int = 256) -> tuple[float, float]:
    """Mean volume of matched (diagonal) and mismatched (off-diagonal) pairs on the first ``n`` items."""
    with torch.no_grad():
        V = volume_matrix(aligned.z[:n].double(), anchor)
    eye = torch.eye(V.shape[0], dtype=torch.bool)
    return V[eye].mean().item(), V[~eye].mean().item()


def save_heads(path, heads: nn.ModuleList, cfg: AlignConfig) -> None:
    tensors = {f"head.{j}.weight": h.weight for j, h in enumerate(heads)}
    meta = {"kind": "align-heads", "d": cfg.d, "dims": [h.weight.shape[1] for h in heads]}
    save_checkpoint(path, tensors, meta)


def load_heads(path) -> nn.ModuleList:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "align-heads":
        raise ValueError(f"{path} does not hold alignment heads")
    heads = nn.ModuleList()
    for j, dj in enumerate(meta["dims"]):
        h = ProjectionHead(dj, meta["d"])
        with torch.no_grad():
            h.weight.copy_(tensors[f"head.{j}.weight"])
        heads.append(h)
    return heads
