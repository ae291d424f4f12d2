"""Unified token streams with anchor/action tokens and (m, n) coordinates.

Layout per user::

    profile codes (m=0, n=1..L_u)
    item t: codes (m=t, n=1..L_i), Anchor (n=L_i+1), Action (n=L_i+2)
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import torch


class TokenKind(IntEnum):
    PROFILE = 0
    ITEM = 1
    ANCHOR = 2
    ACTION = 3
    PAD = 4


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Disjoint id ranges: pad, anchor, actions, per-layer codes, profile buckets.

    Code ``v`` of code layer ``k`` (shared layers first, then one specific layer
    per modality) maps to ``code_base + k * codebook_size + v``, so equal
    integers in different layers are different tokens.
    """

    n_layers: int
    codebook_size: int
    n_actions: int = 2
    profile_len: int = 6
    profile_buckets: int = 256

    PAD = 0
    ANCHOR = 1

    def __post_init__(self):
        if self.n_layers < 1 or self.codebook_size < 1 or self.n_actions < 1:
            raise ValueError("vocab needs at least one code layer, one code and one action")
        if self.profile_len < 0 or (self.profile_len > 0 and self.profile_buckets < 1):
            raise ValueError("profile_len >= 0 and profile_buckets >= 1 required")

    @property
    def action_base(self) -> int:
        return 2

    @property
    def code_base(self) -> int:
        return self.action_base + self.n_actions

    @property
    def profile_base(self) -> int:
        return self.code_base + self.n_layers * self.codebook_size

    @property
    def size(self) -> int:
        return self.profile_base + self.profile_len * self.profile_buckets

    def action_id(self, action: int) -> int:
        if not 0 <= action < self.n_actions:
            raise StreamError(f"action {action} outside [0, {self.n_actions})")
        return self.action_base + action

    def code_id(self, layer: int, code: int) -> int:
        if not 0 <= layer < self.n_layers or not 0 <= code < self.codebook_size:
            raise StreamError(f"code ({layer}, {code}) outside the vocabulary")
        return self.code_base + layer * self.codebook_size + code

    def profile_id(self, position: int, bucket: int) -> int:
        if not 0 <= position < self.profile_len or not 0 <= bucket < self.profile_buckets:
            raise StreamError(f"profile token ({position}, {bucket}) outside the vocabulary")
        return self.profile_base + position * self.profile_buckets + bucket

    def item_ids(self, codes: Sequence[int]) -> list[int]:
        if len(codes) == 0:
            raise StreamError("item has no codes")
        if len(codes) > self.n_layers:
            raise StreamError(f"item has {len(codes)} codes, vocab has {self.n_layers} layers")
        return [self.code_id(k, int(c)) for k, c in enumerate(codes)]

    def decode(self, vocab_id: int) -> tuple[str, int, int]:
        """``(range name, layer or position, value)`` for a vocab id."""
        if vocab_id == self.PAD:
            return ("pad", 0, 0)
        if vocab_id == self.ANCHOR:
            return ("anchor", 0, 0)
        if self.action_base <= vocab_id < self.code_base:
            return ("action", 0, vocab_id - self.action_base)
        if self.code_base <= vocab_id < self.profile_base:
            layer, code = divmod(vocab_id - self.code_base, self.codebook_size)
            return ("code", layer, code)
        if self.profile_base <= vocab_id < self.size:
            pos, bucket = divmod(vocab_id - self.profile_base, self.profile_buckets)
            return ("profile", pos, bucket)
        raise StreamError(f"id {vocab_id} outside vocabulary of size {self.size}")

    def action_slice(self) -> slice:
        return slice(self.action_base, self.code_base)


def hashed_profile(user_id: str, vocab: Vocab) -> list[int]:
    """Per-user bucket tokens, used when no user-side modalities exist."""
    return [
        vocab.profile_id(p, zlib.crc32(f"{user_id}#{p}".encode()) % vocab.profile_buckets)
        for p in range(vocab.profile_len)
    ]


@dataclass(frozen=True)
class SemanticToken:
    vocab_id: int
    kind: TokenKind
    m: int
    n: int


@dataclass
class TokenStream:
    tokens: list[SemanticToken] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def anchor_positions(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t.kind == TokenKind.ANCHOR]

    @property
    def action_positions(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t.kind == TokenKind.ACTION]

    @property
    def n_items(self) -> int:
        return sum(t.kind == TokenKind.ANCHOR for t in self.tokens)

    @property
    def profile_len(self) -> int:
        return sum(t.kind == TokenKind.PROFILE for t in self.tokens)

    def tensors(self) -> dict[str, torch.Tensor]:
        """Column tensors ``ids, m, n, kind`` of shape ``(T,)``."""
        cols = list(zip(*[(t.vocab_id, t.m, t.n, int(t.kind)) for t in self.tokens])) or [(), (), (), ()]
        return {k: torch.tensor(c, dtype=torch.long) for k, c in zip(("ids", "m", "n", "kind"), cols)}

    def profile_ids(self) -> list[int]:
        return [t.vocab_id for t in self.tokens if t.kind == TokenKind.PROFILE]

    def history(self, vocab: Vocab) -> list[tuple[list[int], int]]:
        """Recover ``[(codes, action), ...]`` in order."""
        out: list[tuple[list[int], int]] = []
        codes: list[int] = []
        for t in self.tokens:
            if t.kind == TokenKind.ITEM:
                codes.append(vocab.decode(t.vocab_id)[2])
            elif t.kind == TokenKind.ACTION:
                out.append((codes, vocab.decode(t.vocab_id)[2]))
                codes = []
        return out

    def dump(self) -> str:
        """One token per line: ``idx kind vocab_id m n``."""
        return "".join(f"{i} {t.kind.name} {t.vocab_id} {t.m} {t.n}\n" for i, t in enumerate(self.tokens))


def profile_tokens(profile_ids: Sequence[int]) -> list[SemanticToken]:
    return [SemanticToken(int(v), TokenKind.PROFILE, 0, p + 1) for p, v in enumerate(profile_ids)]


def item_segment(codes: Sequence[int], m: int, vocab: Vocab, action: int | None = None) -> list[SemanticToken]:
    """Codes then Anchor, then the Action token when ``action`` is given."""
    ids = vocab.item_ids(codes)
    seg = [SemanticToken(v, TokenKind.ITEM, m, n + 1) for n, v in enumerate(ids)]
    seg.append(SemanticToken(Vocab.ANCHOR, TokenKind.ANCHOR, m, len(ids) + 1))
    if action is not None:
        seg.append(SemanticToken(vocab.action_id(action), TokenKind.ACTION, m, len(ids) + 2))
    return seg


def build_stream(profile_ids: Sequence[int], history: Sequence[tuple[Sequence[int], int]], vocab: Vocab) -> TokenStream:
    """Profile tokens followed by one (codes, Anchor, Action) segment per event."""
    tokens = profile_tokens(profile_ids)
    for t, (codes, action) in enumerate(history, start=1):
        tokens.extend(item_segment(codes, t, vocab, action))
    return TokenStream(tokens)


def truncate(stream: TokenStream, max_items: int) -> TokenStream:
    """Keep the profile and the most recent ``max_items`` segments, renumbering m from 1."""
    if max_items < 0:
        raise ValueError("max_items must be >= 0")
    K = stream.n_items
    drop = max(K - max_items, 0)
    if drop == 0:
        return TokenStream(list(stream.tokens))
    kept = [t for t in stream.tokens if t.m == 0]
    kept += [SemanticToken(t.vocab_id, t.kind, t.m - drop, t.n) for t in stream.tokens if t.m > drop]
    return TokenStream(kept)


def validate_stream(stream: TokenStream) -> None:
    """Raise ``StreamError`` when layout or coordinate invariants are broken.

    The last segment may stop after its Anchor (a segment awaiting its action).
    """
    toks = stream.tokens
    i = 0
    while i < len(toks) and toks[i].kind == TokenKind.PROFILE:
        if toks[i].m != 0 or toks[i].n != i + 1:
            raise StreamError(f"token {i}: profile tokens need m=0 and n={i + 1}")
        i += 1
    expected_m = 1
    while i < len(toks):
        start, m = i, toks[i].m
        while i < len(toks) and toks[i].m == m:
            i += 1
        seg = toks[start:i]
        if m != expected_m:
            raise StreamError(f"token {start}: segment has m={m}, expected {expected_m}")
        kinds = [t.kind for t in seg]
        n_codes = kinds.index(TokenKind.ANCHOR) if TokenKind.ANCHOR in kinds else -1
        tail = [TokenKind.ANCHOR, TokenKind.ACTION] if i < len(toks) else kinds[n_codes:]
        if (n_codes < 1 or any(k != TokenKind.ITEM for k in kinds[:n_codes])
                or kinds[n_codes:] != tail or tail not in ([TokenKind.ANCHOR], [TokenKind.ANCHOR, TokenKind.ACTION])):
            raise StreamError(f"segment {m}: expected codes, Anchor, Action")
        if [t.n for t in seg] != list(range(1, len(seg) + 1)):
            raise StreamError(f"segment {m}: n must run 1..{len(seg)}")
        expected_m += 1
