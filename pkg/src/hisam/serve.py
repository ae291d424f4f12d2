"""Cached decoding with anchor eviction, one-pass candidate ranking and a cost bench.

Under the Memory-Anchor mask an item's codes and Action are never attended by
later items, so once an item's Action has been consumed its non-anchor keys and
values can leave the cache without changing any future logit. Keys are cached
after rotation with their original coordinates, so compaction never disturbs
relative positions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .hmat import HMAT, ModelConfig, anchor_route, visibility
from .ingest import POSITIVE_ACTION
from .seqstream import SemanticToken, TokenKind, TokenStream, Vocab, build_stream, item_segment


class CoordinateError(ValueError):
    pass


class BlockTooLongError(ValueError):
    pass


@dataclass
class KvCacheEntry:
    layer: int
    slot: int
    key: torch.Tensor  # (H_kv, d_head), rotated
    value: torch.Tensor
    m: int
    n: int
    kind: TokenKind


@dataclass
class AnchorCache:
    """Per-layer rotated keys/values plus the logical coordinates of every slot."""

    n_layers: int
    keys: list[torch.Tensor | None] = field(default_factory=list)  # (H_kv, N, d_head)
    values: list[torch.Tensor | None] = field(default_factory=list)
    m: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    n: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    kind: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    last: tuple[int, int] = (0, 0)
    last_kind: TokenKind | None = None
    visible_pairs: int = 0  # query-key pairs scored per layer since creation

    def __post_init__(self):
        if not self.keys:
            self.keys = [None] * self.n_layers
            self.values = [None] * self.n_layers

    def __len__(self) -> int:
        return int(self.m.numel())

    @property
    def n_items(self) -> int:
        """Items whose Action has been consumed."""
        return self.last[0] if self.last_kind == TokenKind.ACTION else max(self.last[0] - 1, 0)

    @property
    def at_boundary(self) -> bool:
        return self.last_kind in (None, TokenKind.PROFILE, TokenKind.ACTION)

    def entries(self, layer: int) -> list[KvCacheEntry]:
        k, v = self.keys[layer], self.values[layer]
        return [
            KvCacheEntry(layer, i, k[:, i], v[:, i], int(self.m[i]), int(self.n[i]), TokenKind(int(self.kind[i])))
            for i in range(len(self))
        ]

    def nbytes(self) -> int:
        return sum(t.numel() * t.element_size() for t in self.keys + self.values if t is not None)

    def evict_segment(self, m: int) -> None:
        """Drop every non-anchor entry of item ``m`` and compact the slots."""
        if m <= 0:
            return
        keep = ~((self.m == m) & (self.kind != TokenKind.ANCHOR))
        self.m, self.n, self.kind = self.m[keep], self.n[keep], self.kind[keep]
        self.keys = [None if k is None else k[:, keep] for k in self.keys]
        self.values = [None if v is None else v[:, keep] for v in self.values]


def new_cache(model: HMAT) -> AnchorCache:
    return AnchorCache(model.cfg.n_layers)


def _check_coords(cache: AnchorCache, tokens: Sequence[SemanticToken]) -> None:
    prev_m, prev_n = cache.last
    started = cache.last_kind is not None
    for t in tokens:
        if started and (t.m < prev_m or (t.m == prev_m and t.n <= prev_n)):
            raise CoordinateError(f"coordinate ({t.m}, {t.n}) does not follow ({prev_m}, {prev_n})")
        prev_m, prev_n, started = t.m, t.n, True


def _run_layers(model: HMAT, cache: AnchorCache, ids, m, n, visible, append: bool) -> torch.Tensor:
    """Push new tokens through every layer against the cached keys; returns final hidden ``(T, width)``."""
    x = model.embed(ids[None])
    for layer, block in enumerate(model.blocks):
        q, k, v = block.attn.project(block.attn_norm(x), m[None], n[None], model.tables)
        if cache.keys[layer] is not None:
            k_all = torch.cat([cache.keys[layer][None], k], dim=2)
            v_all = torch.cat([cache.values[layer][None], v], dim=2)
        else:
            k_all, v_all = k, v
        x = x + block.attn.attend(q, k_all, v_all, visible[None])
        x = x + block.ffn(block.ffn_norm(x))
        if append:
            cache.keys[layer] = k_all[0]
            cache.values[layer] = v_all[0]
    return model.norm(x)[0]


def _visible_against_cache(cache: AnchorCache, m, seg, kind) -> torch.Tensor:
    """``(T_new, N_cache + T_new)`` visibility of new queries over cached then new keys."""
    T = m.numel()
    k_m = torch.cat([cache.m, m])
    k_seg = torch.cat([cache.m, seg])
    k_kind = torch.cat([cache.kind, kind])
    causal = torch.ones(T, len(cache) + T, dtype=torch.bool).tril(len(cache))
    return causal & anchor_route(m[:, None], seg[:, None], k_m[None], k_seg[None], k_kind[None])


def incremental_decode(model: HMAT, cache: AnchorCache, tokens: Sequence[SemanticToken]) -> torch.Tensor:
    """Logits ``(len(tokens), vocab)`` for the next stretch of a stream; updates and evicts ``cache``.

    Eviction happens after each Action token is consumed.
    """
    if not tokens:
        return torch.zeros(0, model.cfg.vocab_size)
    _check_coords(cache, tokens)
    ids = torch.tensor([t.vocab_id for t in tokens])
    model.check_ids(ids)
    m = torch.tensor([t.m for t in tokens])
    n = torch.tensor([t.n for t in tokens])
    kind = torch.tensor([int(t.kind) for t in tokens])
    vis = _visible_against_cache(cache, m, m, kind)
    with torch.no_grad():
        h = _run_layers(model, cache, ids, m, n, vis, append=True)
        logits = model.head(h)
    cache.visible_pairs += int(vis.sum())
    cache.m = torch.cat([cache.m, m])
    cache.n = torch.cat([cache.n, n])
    cache.kind = torch.cat([cache.kind, kind])
    cache.last = (tokens[-1].m, tokens[-1].n)
    cache.last_kind = tokens[-1].kind
    for t in tokens:
        if t.kind == TokenKind.ACTION:
            cache.evict_segment(t.m)
    return logits


def prefill(model: HMAT, stream: TokenStream, token_by_token: bool = False) -> AnchorCache:
    cache = new_cache(model)
    if token_by_token:
        for t in stream.tokens:
            incremental_decode(model, cache, [t])
    else:
        incremental_decode(model, cache, stream.tokens)
    return cache


def candidate_block(candidates: Sequence[Sequence[int]], m: int, vocab: Vocab) -> list[list[SemanticToken]]:
    """Codes plus Anchor per candidate, all at item order ``m``."""
    return [item_segment(c, m, vocab) for c in candidates]


def rank_one_pass(model: HMAT, cache: AnchorCache, candidates: Sequence[Sequence[int]], vocab: Vocab,
                  action: int = POSITIVE_ACTION) -> list[float]:
    """P(``action``) for every candidate appended after the cached history in one forward pass.

    Each candidate gets item order ``L_valid + 1`` and its own segment, so it
    sees the profile, history anchors and its own tokens only.
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    if not cache.at_boundary:
        raise CoordinateError("history cache ends inside an item; finish it before ranking")
    m_cand = cache.n_items + 1
    blocks = candidate_block(candidates, m_cand, vocab)
    total = len(cache) + sum(len(b) for b in blocks)
    if total > model.cfg.max_len:
        raise BlockTooLongError(
            f"{len(candidates)} candidates need {total} positions > max_len {model.cfg.max_len}; "
            "split them into chunks (rank_candidates does this)"
        )
    tokens = [t for b in blocks for t in b]
    seg = torch.tensor([m_cand + i for i, b in enumerate(blocks) for _ in b])
    ids = torch.tensor([t.vocab_id for t in tokens])
    model.check_ids(ids)
    m = torch.full((len(tokens),), m_cand)
    n = torch.tensor([t.n for t in tokens])
    kind = torch.tensor([int(t.kind) for t in tokens])
    vis = _visible_against_cache(cache, m, seg, kind)
    anchors = torch.tensor([i for i, t in enumerate(tokens) if t.kind == TokenKind.ANCHOR])
    with torch.no_grad():
        h = _run_layers(model, cache, ids, m, n, vis, append=False)
        logits = model.action_logits(h[anchors], vocab.action_slice())
    return torch.softmax(logits.double(), dim=-1)[:, action].tolist()


def rank_candidates(model: HMAT, cache: AnchorCache, candidates: Sequence[Sequence[int]], vocab: Vocab,
                    max_candidates: int = 64, action: int = POSITIVE_ACTION) -> list[float]:
    """``rank_one_pass`` over chunks that fit the model's length budget."""
    scores: list[float] = []
    seg_len = max((len(c) + 1 for c in candidates), default=1)
    fit = max((model.cfg.max_len - len(cache)) // seg_len, 1)
    step = max(min(max_candidates, fit), 1)
    for start in range(0, len(candidates), step):
        scores += rank_one_pass(model, cache, candidates[start : start + step], vocab, action)
    return scores


# ---------------------------------------------------------------------------
# cost accounting


def ma_visible_pairs(L_u: int, K: int, L_i: int) -> int:
    """Visible (query, key) pairs for a full stream of ``K`` items under the Memory-Anchor mask.

    Token ``j`` (1-based) of item ``t`` sees ``L_u`` profile tokens, ``t - 1``
    anchors and ``j`` tokens of its own segment.
    """
    S = L_i + 2
    return L_u * (L_u + 1) // 2 + K * S * L_u + S * K * (K - 1) // 2 + K * S * (S + 1) // 2


def causal_visible_pairs(T: int) -> int:
    return T * (T + 1) // 2


def history_keys(L_u: int, K: int, L_i: int) -> dict[str, int]:
    """Keys visible to a new item's first token after ``K`` completed items."""
    return {
        "memory_anchor": L_u + K,
        "full_stream": L_u + K * (L_i + 2),
        "flat_codes": L_u + K * L_i,
    }


def random_stream(K: int, L_i: int, vocab: Vocab, gen: torch.Generator) -> TokenStream:
    profile = [vocab.profile_id(p, int(torch.randint(vocab.profile_buckets, (1,), generator=gen)))
               for p in range(vocab.profile_len)]
    history = [
        (torch.randint(vocab.codebook_size, (L_i,), generator=gen).tolist(),
         int(torch.randint(vocab.n_actions, (1,), generator=gen)))
        for _ in range(K)
    ]
    return build_stream(profile, history, vocab)


@dataclass
class BenchRow:
    K: int
    L_i: int
    candidates: int
    ma_pairs_counted: int
    ma_pairs_formula: int
    full_pairs: int
    decode_pairs: int
    cache_entries: int
    cache_bytes: int
    uncached_bytes: int
    history_ratio_full: float
    history_ratio_flat: float
    cached_ms_median: float
    cached_ms_p99: float
    uncached_ms_median: float
    uncached_ms_p99: float


def bench_serving(model: HMAT, vocab: Vocab, workloads: Sequence[tuple[int, int, int]], repeats: int = 5,
                  seed: int = 0) -> list[BenchRow]:
    """Count attention pairs and time cached vs uncached candidate scoring per ``(K, L_i, candidates)``."""
    gen = torch.Generator().manual_seed(seed)
    rows = []
    for K, L_i, n_cand in workloads:
        if L_i > vocab.n_layers:
            raise ValueError(f"L_i={L_i} exceeds the vocabulary's {vocab.n_layers} code layers")
        stream = random_stream(K, L_i, vocab, gen)
        t = stream.tensors()
        ma = int(visibility(t["m"], t["kind"]).sum())
        full = int(visibility(t["m"], t["kind"], memory_anchor=False).sum())
        cache = prefill(model, stream, token_by_token=True)
        decode_pairs = cache.visible_pairs
        per_entry = cache.nbytes() // max(len(cache), 1)
        cands = [torch.randint(vocab.codebook_size, (L_i,), generator=gen).tolist() for _ in range(n_cand)]

        cached, uncached = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            rank_candidates(model, cache, cands, vocab)
            cached.append(1e3 * (time.perf_counter() - t0))
            t0 = time.perf_counter()
            _score_uncached(model, stream, cands, vocab)
            uncached.append(1e3 * (time.perf_counter() - t0))
        hk = history_keys(vocab.profile_len, K, L_i)
        rows.append(BenchRow(
            K, L_i, n_cand, ma, ma_visible_pairs(vocab.profile_len, K, L_i), full, decode_pairs,
            len(cache), cache.nbytes(), per_entry * len(stream),
            hk["full_stream"] / hk["memory_anchor"], hk["flat_codes"] / hk["memory_anchor"],
            float(np.median(cached)), float(np.percentile(cached, 99)),
            float(np.median(uncached)), float(np.percentile(uncached, 99)),
        ))
    return rows


def _score_uncached(model: HMAT, stream: TokenStream, candidates, vocab: Vocab) -> list[float]:
    """Reference path: one dense forward per candidate over the whole stream, no cache."""
    out = []
    m_cand = stream.n_items + 1
    for c in candidates:
        s = TokenStream(stream.tokens + item_segment(c, m_cand, vocab))
        with torch.no_grad():
            logits = model.forward_stream(s)[-1, vocab.action_slice()]
        out.append(torch.softmax(logits.double(), -1)[POSITIVE_ACTION].item())
    return out


def bench_model(vocab: Vocab, width: int = 64, n_layers: int = 2, seed: int = 0, max_len: int = 4096) -> HMAT:
    """Small randomly initialized model for cost measurements."""
    return HMAT(ModelConfig(vocab_size=vocab.size, width=width, n_layers=n_layers, n_heads=4, n_kv_heads=2,
                            max_len=max_len), seed=seed)
