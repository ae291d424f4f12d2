"""Decoder over unified token streams.

Rotary positions are split: the first half of each head rotates with the item
order ``m`` (slow base), the second half with the in-item position ``n`` (fast
base). The Memory-Anchor mask hides every historical token except profile
tokens and earlier items' Anchor tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .seqstream import TokenKind, TokenStream, Vocab
from .tensorio import load_checkpoint, save_checkpoint


@dataclass
class ModelConfig:
    vocab_size: int = 0
    width: int = 512
    n_layers: int = 4
    n_heads: int = 8
    n_kv_heads: int = 2
    ffn_dim: int = 0  # 0 -> 5 * width
    base_inter: float = 10000.0
    base_intra: float = 100.0
    norm_eps: float = 1e-6
    max_len: int = 300

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim or 5 * self.width

    def violations(self) -> list[str]:
        out = []
        if self.vocab_size < 1:
            out.append("model.vocab_size must be >= 1")
        if self.n_layers < 1:
            out.append("model.n_layers must be >= 1")
        if self.n_heads < 1 or self.n_kv_heads < 1:
            out.append("model.n_heads and model.n_kv_heads must be >= 1")
        elif self.n_heads % self.n_kv_heads:
            out.append("model.n_heads must be divisible by model.n_kv_heads")
        if self.n_heads >= 1 and self.width % self.n_heads:
            out.append("model.width must be divisible by model.n_heads")
        elif self.n_heads >= 1 and self.head_dim % 4:
            out.append("head dim must be divisible by 4")
        if self.base_inter <= 1 or self.base_intra <= 1:
            out.append("rotary bases must be > 1")
        if self.max_len < 1:
            out.append("model.max_len must be >= 1")
        return out

    def validate(self) -> None:
        bad = self.violations()
        if bad:
            raise ValueError("; ".join(bad))


# ---------------------------------------------------------------------------
# rotary positions


@dataclass
class HRopeTables:
    head_dim: int
    base_inter: float = 10000.0
    base_intra: float = 100.0

    def __post_init__(self):
        if self.head_dim % 4:
            raise ValueError("head dim must be divisible by 4")
        j = torch.arange(self.head_dim // 4, dtype=torch.float64)
        half = self.head_dim / 2
        self.theta_inter = self.base_inter ** (-2 * j / half)
        self.theta_intra = self.base_intra ** (-2 * j / half)

    def angles(self, m: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
        """Per-pair angles ``(..., d/2)``: inter pairs first, then intra pairs."""
        m = torch.as_tensor(m, dtype=torch.float64)
        n = torch.as_tensor(n, dtype=torch.float64)
        return torch.cat([m[..., None] * self.theta_inter, n[..., None] * self.theta_intra], dim=-1)


def hrope_apply(x: torch.Tensor, m, n, tables: HRopeTables) -> torch.Tensor:
    """Rotate adjacent pairs of ``x`` (``(..., d)``) by ``m``/``n`` angles; ``m, n`` broadcast over ``x[..., 0]``."""
    if x.shape[-1] != tables.head_dim:
        raise ValueError(f"vector dim {x.shape[-1]} != table head dim {tables.head_dim}")
    ang = tables.angles(m, n)
    cos, sin = ang.cos().to(x.dtype), ang.sin().to(x.dtype)
    pairs = x.unflatten(-1, (-1, 2))
    x0, x1 = pairs[..., 0], pairs[..., 1]
    return torch.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], dim=-1).flatten(-2)


def hrope_score(q: torch.Tensor, k: torch.Tensor, q_coord, k_coord, tables: HRopeTables) -> torch.Tensor:
    """``<R(m_q, n_q) q, R(m_k, n_k) k>``."""
    return (hrope_apply(q, *q_coord, tables) * hrope_apply(k, *k_coord, tables)).sum(-1)


# ---------------------------------------------------------------------------
# masks


def anchor_route(m_q, seg_q, m_k, seg_k, kind_k) -> torch.Tensor:
    """Routing part of the mask for broadcastable query/key coordinates (no causality)."""
    return (m_k == 0) | (seg_q == seg_k) | ((m_k < m_q) & (kind_k == TokenKind.ANCHOR))


def visibility(m: torch.Tensor, kind: torch.Tensor, valid: torch.Tensor | None = None,
               seg: torch.Tensor | None = None, memory_anchor: bool = True) -> torch.Tensor:
    """Boolean ``(..., T, T)`` matrix, ``[q, k]`` True when query ``q`` may attend key ``k``.

    A key is visible when it is causal, not padding and either a profile token,
    in the query's own segment, or an Anchor of an earlier item. ``seg``
    defaults to ``m``; one-pass ranking gives every candidate its own segment.
    """
    T = m.shape[-1]
    vis = torch.ones(T, T, dtype=torch.bool).tril()
    vis = vis.expand(*m.shape[:-1], T, T)
    if valid is not None:
        vis = vis & valid[..., None, :]
    if not memory_anchor:
        return vis
    seg = m if seg is None else seg
    route = anchor_route(m[..., :, None], seg[..., :, None], m[..., None, :], seg[..., None, :], kind[..., None, :])
    return vis & route


def build_mask(stream: TokenStream, memory_anchor: bool = True) -> torch.Tensor:
    t = stream.tensors()
    return visibility(t["m"], t["kind"], memory_anchor=memory_anchor)


# ---------------------------------------------------------------------------
# layers


class SwiGLU(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(width, hidden, bias=False)
        self.up = nn.Linear(width, hidden, bias=False)
        self.down = nn.Linear(hidden, width, bias=False)

    def forward(self, x):
        return self.down(nn.functional.silu(self.gate(x)) * self.up(x))


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
    """``q: (B, H, Tq, d)``, ``k, v: (B, H, Tk, d)``, ``visible: (B, Tq, Tk)``; rows with no key give zeros."""
    vis = visible[:, None]
    any_key = vis.any(-1, keepdim=True)
    # rows without keys attend everywhere and are zeroed afterwards, which keeps the softmax finite
    out = nn.functional.scaled_dot_product_attention(q, k, v, attn_mask=vis | ~any_key)
    return out * any_key


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads, self.n_kv, self.head_dim = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
        self.q = nn.Linear(cfg.width, cfg.n_heads * cfg.head_dim, bias=False)
        self.k = nn.Linear(cfg.width, cfg.n_kv_heads * cfg.head_dim, bias=False)
        self.v = nn.Linear(cfg.width, cfg.n_kv_heads * cfg.head_dim, bias=False)
        self.o = nn.Linear(cfg.n_heads * cfg.head_dim, cfg.width, bias=False)

    def project(self, x, m, n, tables: HRopeTables):
        """Rotated queries ``(B, H, T, d)`` and rotated keys / values ``(B, H_kv, T, d)``."""
        q = self.q(x).unflatten(-1, (self.n_heads, self.head_dim)).transpose(1, 2)
        k = self.k(x).unflatten(-1, (self.n_kv, self.head_dim)).transpose(1, 2)
        v = self.v(x).unflatten(-1, (self.n_kv, self.head_dim)).transpose(1, 2)
        q = hrope_apply(q, m[:, None], n[:, None], tables)
        k = hrope_apply(k, m[:, None], n[:, None], tables)
        return q, k, v

    def attend(self, q, k, v, visible):
        group = self.n_heads // self.n_kv
        k, v = k.repeat_interleave(group, dim=1), v.repeat_interleave(group, dim=1)
        out = masked_attention(q, k, v, visible)
        return self.o(out.transpose(1, 2).flatten(-2))

    def forward(self, x, m, n, visible, tables):
        return self.attend(*self.project(x, m, n, tables), visible)


class Block(nn.Module):
    """Pre-norm attention and gated FFN, each with a residual connection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = nn.RMSNorm(cfg.width, eps=cfg.norm_eps)
        self.attn = Attention(cfg)
        self.ffn_norm = nn.RMSNorm(cfg.width, eps=cfg.norm_eps)
        self.ffn = SwiGLU(cfg.width, cfg.ffn_width)

    def forward(self, x, m, n, visible, tables):
        x = x + self.attn(self.attn_norm(x), m, n, visible, tables)
        return x + self.ffn(self.ffn_norm(x))


class HMAT(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tables = HRopeTables(cfg.head_dim, cfg.base_inter, cfg.base_intra)
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.embed = nn.Embedding(cfg.vocab_size, cfg.width)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.n_layers)])
        self.norm = nn.RMSNorm(cfg.width, eps=cfg.norm_eps)
        self.head = nn.Linear(cfg.width, cfg.vocab_size, bias=False)
        with torch.no_grad():
            self.embed.weight.normal_(0.0, 0.02)
            self.head.weight.normal_(0.0, 0.02)
        torch.random.set_rng_state(gen_state)

    def check_ids(self, ids: torch.Tensor) -> None:
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id outside vocabulary of size {self.cfg.vocab_size}")

    def hidden(self, ids, m, n, visible) -> torch.Tensor:
        """Final normalized states ``(B, T, width)``."""
        if ids.shape[-1] > self.cfg.max_len:
            raise ValueError(f"sequence of {ids.shape[-1]} tokens exceeds max_len {self.cfg.max_len}")
        self.check_ids(ids)
        x = self.embed(ids)
        for block in self.blocks:
            x = block(x, m, n, visible, self.tables)
        return self.norm(x)

    def forward(self, ids, m, n, visible) -> torch.Tensor:
        """Logits ``(B, T, vocab)`` for ``ids, m, n: (B, T)`` and ``visible: (B, T, T)``."""
        return self.head(self.hidden(ids, m, n, visible))

    def action_logits(self, h: torch.Tensor, actions: slice) -> torch.Tensor:
        """Logits restricted to the action id range, from hidden states ``h``."""
        return h @ self.head.weight[actions].T

    def forward_stream(self, stream: TokenStream, memory_anchor: bool = True) -> torch.Tensor:
        """Logits ``(T, vocab)`` for a single stream."""
        t = stream.tensors()
        vis = visibility(t["m"], t["kind"], memory_anchor=memory_anchor)
        return self(t["ids"][None], t["m"][None], t["n"][None], vis[None])[0]


def save_model(path, model: HMAT, vocab: Vocab | None = None) -> None:
    meta = {"kind": "hmat", "config": asdict(model.cfg)}
    if vocab is not None:
        meta["vocab"] = asdict(vocab)
    save_checkpoint(path, dict(model.state_dict()), meta)


def load_model(path) -> tuple[HMAT, Vocab | None]:
    """Model and, when it was saved with one, its vocabulary."""
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "hmat":
        raise ValueError(f"{path} does not hold a model checkpoint")
    model = HMAT(ModelConfig(**meta["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model, Vocab(**meta["vocab"]) if "vocab" in meta else None
