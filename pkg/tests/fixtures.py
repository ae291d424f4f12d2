"""Shared builders for the training-level tests."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from hisam.cga import AlignConfig, train_alignment
from hisam.dmrq import DMRQConfig, tokenize, train_dmrq
from hisam.hmat import HMAT, ModelConfig
from hisam.ingest import SyntheticSpec, synth_corpus
from hisam.seqstream import Vocab
from hisam.train_eval import metric_report, score_splits, split_users, train, training_streams


@dataclass
class Sequences:
    vocab: Vocab
    splits: list
    streams: list
    max_items: int


def planted_sequences(seed: int, n_users: int = 2000, n_items: int = 500, max_items: int = 12,
                      codebook_size: int = 32, dmrq_epochs: int = 10) -> Sequences:
    spec = SyntheticSpec(n_items=n_items, n_users=n_users, seed=seed)
    corpus, logs, _ = synth_corpus(spec)
    aligned = train_alignment(corpus, AlignConfig(d=32, steps=300, seed=seed)).aligned
    stack = train_dmrq(aligned, DMRQConfig(codebook_size=codebook_size, epochs=dmrq_epochs, seed=seed)).stack
    codes = {ic.item_id: ic.codes for ic in tokenize(aligned, stack)}
    vocab = Vocab(stack.n_codes, codebook_size)
    splits = split_users(logs, codes, vocab, 0.1)
    return Sequences(vocab, splits, training_streams(splits, vocab, max_items), max_items)


def small_model(vocab: Vocab, seed: int, width: int = 64) -> HMAT:
    return HMAT(ModelConfig(vocab_size=vocab.size, width=width, n_layers=2, n_heads=4, n_kv_heads=2), seed=seed)


def evaluate(model: HMAT, data: Sequences) -> dict:
    return metric_report(score_splits(model, data.splits, data.vocab, data.max_items), data.splits)


def fit(model: HMAT, data: Sequences, mode: str, steps: int, lr: float, seed: int, batch_size: int = 32,
        eval_at: tuple[int, ...] = (), stop_at: float | None = None,
        min_steps: int = 0) -> tuple[dict[int, float], list[float]]:
    """Train; returns eval AUC at the ``eval_at`` steps and the per-step loss curve.

    Stops once ``stop_at`` has been reached and at least ``min_steps`` are done.
    """
    aucs: dict[int, float] = {}

    def check(step):
        if step in eval_at:
            aucs[step] = evaluate(model, data)["auc"]
            reached = stop_at is not None and max(aucs.values()) >= stop_at
            return reached and step >= min_steps
        return False

    torch.manual_seed(seed)
    result = train(model, data.streams, data.vocab, mode, steps, lr, batch_size, seed=seed, log_every=0,
                   callback=check)
    return aucs, [loss for _, loss in result.curve]
