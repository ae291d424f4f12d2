"""Pre-training, fine-tuning and ranking metrics.

Pre-training predicts every next token under a plain causal mask. Fine-tuning
switches the Memory-Anchor mask on and only scores Action tokens, each predicted
from the Anchor right before it, over the action id range.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .cga import TrainingDivergedError
from .hmat import HMAT, save_model, visibility
from .ingest import POSITIVE_ACTION, InteractionLog
from .seqstream import TokenKind, TokenStream, Vocab, build_stream, hashed_profile

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    pt_steps: int = 0
    sft_steps: int = 2000
    pt_lr: float = 2e-4
    sft_lr: float = 1e-4
    batch_size: int = 32
    max_items: int = 20
    eval_frac: float = 0.1
    cold_threshold: int = 10
    gauc_weighted: bool = True
    negatives: bool = False
    log_every: int = 50
    ckpt_every: int = 0
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.pt_steps < 0 or self.sft_steps < 0:
            out.append("train step counts must be >= 0")
        if self.pt_lr <= 0 or self.sft_lr <= 0:
            out.append("learning rates must be > 0")
        if self.batch_size < 1:
            out.append("train.batch_size must be >= 1")
        if self.max_items < 1:
            out.append("train.max_items must be >= 1")
        if not 0 < self.eval_frac < 1:
            out.append("train.eval_frac must lie in (0, 1)")
        return out


# ---------------------------------------------------------------------------
# batches


@dataclass
class TrainBatch:
    ids: torch.Tensor  # (B, T) long, right-padded with Vocab.PAD
    m: torch.Tensor
    n: torch.Tensor
    kind: torch.Tensor
    valid: torch.Tensor  # (B, T) bool
    loss_mask: torch.Tensor  # (B, T) bool, supervised target positions
    mode: str

    def visible(self) -> torch.Tensor:
        return visibility(self.m, self.kind, self.valid, memory_anchor=self.mode == "sft")


def collate(streams: Sequence[TokenStream], mode: str) -> TrainBatch:
    """Right-pad streams; ``pt`` supervises every non-pad token after the first, ``sft`` only Actions."""
    if mode not in ("pt", "sft"):
        raise ValueError(f"unknown mode {mode!r}")
    if not streams:
        raise ValueError("empty batch")
    T = max(len(s) for s in streams)
    B = len(streams)
    cols = {k: torch.zeros(B, T, dtype=torch.long) for k in ("ids", "m", "n")}
    cols["kind"] = torch.full((B, T), int(TokenKind.PAD), dtype=torch.long)
    valid = torch.zeros(B, T, dtype=torch.bool)
    for b, s in enumerate(streams):
        t = s.tensors()
        L = len(s)
        for k in ("ids", "m", "n", "kind"):
            cols[k][b, :L] = t[k]
        valid[b, :L] = True
    if mode == "pt":
        loss_mask = valid.clone()
        loss_mask[:, 0] = False
    else:
        loss_mask = cols["kind"] == TokenKind.ACTION
    return TrainBatch(cols["ids"], cols["m"], cols["n"], cols["kind"], valid, loss_mask, mode)


def pt_loss(model: HMAT, batch: TrainBatch) -> torch.Tensor:
    """Mean next-token NLL over the full vocabulary."""
    if batch.mode != "pt":
        raise ValueError("pt_loss needs a batch collated in pt mode")
    target_mask = batch.loss_mask[:, 1:]
    if not target_mask.any():
        raise ValueError("batch has no supervised positions")
    h = model.hidden(batch.ids, batch.m, batch.n, batch.visible())[:, :-1]
    return nn.functional.cross_entropy(model.head(h[target_mask]), batch.ids[:, 1:][target_mask])


def sft_loss(model: HMAT, batch: TrainBatch, vocab: Vocab) -> torch.Tensor:
    """Mean NLL of observed actions over the action range, read one position before each Action."""
    if batch.mode != "sft":
        raise ValueError("sft_loss needs a batch collated in sft mode")
    b, j = batch.loss_mask.nonzero(as_tuple=True)
    if len(b) == 0:
        raise ValueError("batch has no action positions")
    h = model.hidden(batch.ids, batch.m, batch.n, batch.visible())
    logits = model.action_logits(h[b, j - 1], vocab.action_slice())
    return nn.functional.cross_entropy(logits, batch.ids[b, j] - vocab.action_base)


# ---------------------------------------------------------------------------
# data


@dataclass
class UserSplit:
    user_id: str
    profile: list[int]
    train: list[tuple[list[int], int]]
    test: list[tuple[list[int], int]]

    @property
    def n_interactions(self) -> int:
        return len(self.train) + len(self.test)


def split_users(logs: Iterable[InteractionLog], item_codes: dict[str, Sequence[int]], vocab: Vocab,
                eval_frac: float = 0.1) -> list[UserSplit]:
    """Chronological split: the last ``ceil(eval_frac * n)`` events of each user are held out.

    Users with a single event keep it for training only.
    """
    out = []
    for lg in logs:
        events = [(list(item_codes[e.item_id]), e.action_id) for e in lg.events]
        n_test = math.ceil(eval_frac * len(events)) if len(events) > 1 else 0
        cut = len(events) - n_test
        out.append(UserSplit(lg.user_id, hashed_profile(lg.user_id, vocab), events[:cut], events[cut:]))
    return out


def training_streams(splits: Sequence[UserSplit], vocab: Vocab, max_items: int) -> list[TokenStream]:
    """Training history cut into consecutive windows of at most ``max_items`` events, newest window last."""
    streams = []
    for sp in splits:
        ev = sp.train
        for end in range(len(ev), 0, -max_items):
            streams.append(build_stream(sp.profile, ev[max(0, end - max_items) : end], vocab))
    return streams


def eval_stream(split: UserSplit, vocab: Vocab, max_items: int) -> tuple[TokenStream, list[int]]:
    """Recent history plus the held-out events; returns the stream and the held-out Action positions."""
    keep = max(max_items - len(split.test), 0)
    history = split.train[len(split.train) - keep :] if keep else []
    events = (history + split.test)[-max_items:]
    stream = build_stream(split.profile, events, vocab)
    n_test = min(len(split.test), len(events))
    return stream, stream.action_positions[len(events) - n_test :]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    curve: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def train(model: HMAT, streams: Sequence[TokenStream], vocab: Vocab, mode: str, steps: int, lr: float,
          batch_size: int, seed: int = 0, log_every: int = 50, ckpt_every: int = 0, ckpt_prefix: str | None = None,
          dump_path: str | None = None, callback: Callable[[int], bool] | None = None,
          betas: tuple[float, float] = (0.9, 0.999)) -> TrainResult:
    """Adam on ``pt`` or ``sft`` loss over seeded shuffled epochs of ``streams``.

    ``callback(step)`` runs after every update with the model in eval mode;
    returning True stops training early.
    """
    result = TrainResult()
    if steps == 0:
        return result
    if mode == "sft":
        streams = [s for s in streams if s.action_positions]
    if not streams:
        raise ValueError("no usable training streams")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=betas)
    order: list[int] = []
    model.train()
    for step in range(1, steps + 1):
        if len(order) < batch_size:
            order += torch.randperm(len(streams), generator=gen).tolist()
        idx, order = order[:batch_size], order[batch_size:]
        batch = collate([streams[i] for i in idx], mode)
        loss = pt_loss(model, batch) if mode == "pt" else sft_loss(model, batch, vocab)
        if not torch.isfinite(loss):
            if dump_path:
                save_model(dump_path, model)
            raise TrainingDivergedError(f"{mode} loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.curve.append((step, loss.item()))
        if log_every and step % log_every == 0:
            log.info("%s step %d loss %.4f", mode, step, loss.item())
        if ckpt_every and ckpt_prefix and step % ckpt_every == 0:
            path = f"{ckpt_prefix}.step{step}.ckpt"
            save_model(path, model)
            result.checkpoints.append(path)
        if callback is not None:
            model.eval()
            stop = callback(step)
            model.train()
            if stop:
                break
    model.eval()
    return result


def write_curve(path, curve: Sequence[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, loss in curve:
            w.writerow([step, repr(float(loss))])


# ---------------------------------------------------------------------------
# scoring and metrics


@dataclass(frozen=True)
class EvalRecord:
    user_id: str
    score: float
    label: int


def action_probabilities(model: HMAT, stream: TokenStream, positions: Sequence[int], vocab: Vocab,
                         action: int = POSITIVE_ACTION) -> list[float]:
    """P(action) at each Action position, read from the preceding Anchor under the Memory-Anchor mask."""
    if not positions:
        return []
    t = stream.tensors()
    vis = visibility(t["m"], t["kind"])
    with torch.no_grad():
        h = model.hidden(t["ids"][None], t["m"][None], t["n"][None], vis[None])[0]
        logits = model.action_logits(h[torch.tensor(positions) - 1], vocab.action_slice())
    return torch.softmax(logits.double(), dim=-1)[:, action].tolist()


def score_splits(model: HMAT, splits: Sequence[UserSplit], vocab: Vocab, max_items: int) -> list[EvalRecord]:
    records = []
    for sp in splits:
        if not sp.test:
            continue
        stream, positions = eval_stream(sp, vocab, max_items)
        probs = action_probabilities(model, stream, positions, vocab)
        labels = [int(stream.tokens[p].vocab_id - vocab.action_base == POSITIVE_ACTION) for p in positions]
        records.extend(EvalRecord(sp.user_id, p, y) for p, y in zip(probs, labels))
    return records


def score_with_negatives(model: HMAT, splits: Sequence[UserSplit], vocab: Vocab, max_items: int,
                         item_codes: dict[str, Sequence[int]], seed: int = 0) -> list[EvalRecord]:
    """Each held-out positive event against one sampled item the user never touched.

    Both candidates are ranked in one pass after the history preceding the
    event; the observed item is labelled 1, the sampled one 0.
    """
    from .serve import prefill, rank_one_pass

    rng = np.random.default_rng(seed)
    ids = sorted(item_codes)
    by_codes = {tuple(c): i for i, c in item_codes.items()}
    records = []
    for sp in splits:
        seen = {by_codes.get(tuple(c)) for c, _ in sp.train + sp.test}
        pool = [i for i in ids if i not in seen]
        if not pool:
            continue
        events = sp.train + sp.test
        for k in range(len(sp.train), len(events)):
            codes, action = events[k]
            if action != POSITIVE_ACTION:
                continue
            history = events[max(0, k - max_items + 1) : k]
            cache = prefill(model, build_stream(sp.profile, history, vocab))
            neg = item_codes[pool[rng.integers(len(pool))]]
            pos_score, neg_score = rank_one_pass(model, cache, [codes, neg], vocab)
            records += [EvalRecord(sp.user_id, pos_score, 1), EvalRecord(sp.user_id, neg_score, 0)]
    return records


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_x)) + 1]
    ends = np.r_[starts[1:], len(x)]
    ranks = np.empty(len(x), dtype=np.float64)
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks


def auc(records: Sequence[EvalRecord]) -> float:
    """Probability that a random positive outscores a random negative; ties count half."""
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def gauc(records: Sequence[EvalRecord], weighted: bool = True) -> float:
    """Mean per-user AUC over users having both classes, weighted by record count unless ``weighted=False``."""
    by_user: dict[str, list[EvalRecord]] = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    total, weight = 0.0, 0.0
    for recs in by_user.values():
        labels = {r.label for r in recs}
        if labels != {0, 1}:
            continue
        w = float(len(recs)) if weighted else 1.0
        total += w * auc(recs)
        weight += w
    if weight == 0:
        raise ValueError("gauc needs a user with both positive and negative records")
    return total / weight


def metric_report(records: Sequence[EvalRecord], splits: Sequence[UserSplit], cold_threshold: int = 10,
                  weighted: bool = True) -> dict[str, float]:
    """AUC/GAUC overall and on cold users (fewer than ``cold_threshold`` interactions); NaN where undefined."""
    def safe(fn, recs):
        try:
            return fn(recs)
        except ValueError:
            return float("nan")

    cold = {sp.user_id for sp in splits if sp.n_interactions < cold_threshold}
    cold_recs = [r for r in records if r.user_id in cold]
    return {
        "auc": safe(auc, records),
        "gauc": safe(lambda r: gauc(r, weighted), records),
        "records": float(len(records)),
        "positives": float(sum(r.label for r in records)),
        "cold_auc": safe(auc, cold_recs),
        "cold_gauc": safe(lambda r: gauc(r, weighted), cold_recs),
        "cold_records": float(len(cold_recs)),
    }


def write_metrics(path, metrics: dict[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, repr(float(v))])
