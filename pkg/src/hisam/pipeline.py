"""Stage functions and the end-to-end run with its manifest.

Every stage reads the files written by earlier stages, so each one can also be
run on its own from the command line.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import __version__
from .cga import AlignConfig, apply_heads, load_heads, save_heads, train_alignment
from .config import PipelineConfig, config_hash, save_config, stage_seed, validate_config
from .dmrq import load_stack, read_codes, save_stack, tokenize, train_dmrq, write_codes
from .hmat import HMAT, load_model, save_model
from .ingest import (DEFAULT_ACTIONS, load_action_vocab, load_embeddings, load_interactions, synth_corpus,
                     write_action_vocab, write_embeddings, write_interactions)
from .seqstream import Vocab
from .train_eval import (metric_report, score_splits, score_with_negatives, split_users, train,
                         training_streams, write_curve, write_metrics)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Artifact:
    stage: str
    path: str  # relative to the run directory
    sha256: str


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    tool_version: str = __version__
    stages: dict[str, str] = field(default_factory=dict)  # name -> "ok" | "failed: ..."
    artifacts: list[Artifact] = field(default_factory=list)

    def add(self, root: Path, stage: str, path: Path) -> None:
        self.artifacts.append(Artifact(stage, str(Path(path).relative_to(root)), sha256_file(path)))

    def write(self, root) -> Path:
        path = Path(root) / MANIFEST
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")
        return path

    @classmethod
    def read(cls, root) -> "RunManifest":
        data = json.loads((Path(root) / MANIFEST).read_text())
        data["artifacts"] = [Artifact(**a) for a in data["artifacts"]]
        return cls(**data)

    def verify(self, root) -> list[str]:
        """Artifacts whose current checksum differs from the recorded one (or that are missing)."""
        bad = []
        for a in self.artifacts:
            p = Path(root) / a.path
            if not p.exists() or sha256_file(p) != a.sha256:
                bad.append(a.path)
        return bad


# ---------------------------------------------------------------------------
# stages


@dataclass
class DataPaths:
    embeddings: Path
    interactions: Path
    actions: Path | None


def stage_synth(cfg: PipelineConfig, out: Path) -> DataPaths:
    spec = dataclasses.replace(cfg.ingest.synthetic, seed=stage_seed(cfg.seed, "synth"))
    corpus, logs, _ = synth_corpus(spec)
    out.mkdir(parents=True, exist_ok=True)
    paths = DataPaths(out / "embeddings.emb", out / "interactions.tsv", out / "actions.txt")
    write_embeddings(paths.embeddings, corpus)
    write_action_vocab(paths.actions, DEFAULT_ACTIONS)
    write_interactions(paths.interactions, logs, DEFAULT_ACTIONS)
    return paths


def _align_config(cfg: PipelineConfig) -> AlignConfig:
    return dataclasses.replace(cfg.align, seed=stage_seed(cfg.seed, "align"))


def stage_align(cfg: PipelineConfig, embeddings: Path, out: Path) -> Path:
    corpus = load_embeddings(embeddings)
    acfg = _align_config(cfg)
    result = train_alignment(corpus, acfg)
    path = out / "align_heads.ckpt"
    save_heads(path, result.heads, acfg)
    return path


def stage_tokenize(cfg: PipelineConfig, embeddings: Path, heads_path: Path, out: Path) -> tuple[Path, Path]:
    corpus = load_embeddings(embeddings)
    aligned = apply_heads(load_heads(heads_path), corpus)
    qcfg = dataclasses.replace(cfg.dmrq, seed=stage_seed(cfg.seed, "dmrq"))
    result = train_dmrq(aligned, qcfg)
    stack_path, codes_path = out / "codebooks.cb", out / "codes.tsv"
    save_stack(stack_path, result.stack)
    write_codes(codes_path, tokenize(aligned, result.stack))
    return stack_path, codes_path


def _vocab(cfg: PipelineConfig, stack_path: Path, n_actions: int) -> Vocab:
    stack = load_stack(stack_path)
    return Vocab(stack.n_codes, stack.shared[0].shape[0], n_actions, cfg.stream.profile_len, cfg.stream.profile_buckets)


def load_sequences(cfg: PipelineConfig, data: DataPaths, stack_path: Path, codes_path: Path):
    """Vocabulary and per-user chronological splits."""
    actions = load_action_vocab(data.actions) if data.actions else list(DEFAULT_ACTIONS)
    stack = load_stack(stack_path)
    codes = read_codes(codes_path, stack.n_shared)
    logs = load_interactions(data.interactions, actions, set(codes), cfg.ingest.sort_events, cfg.ingest.permissive)
    vocab = _vocab(cfg, stack_path, len(actions))
    return vocab, split_users(logs, codes, vocab, cfg.train.eval_frac)


def new_model(cfg: PipelineConfig, vocab: Vocab) -> HMAT:
    mcfg = dataclasses.replace(cfg.model, vocab_size=vocab.size)
    return HMAT(mcfg, seed=stage_seed(cfg.seed, "model"))


def stage_train(cfg: PipelineConfig, mode: str, data: DataPaths, stack_path: Path, codes_path: Path, out: Path,
                init: Path | None = None) -> tuple[Path, Path]:
    """``pt`` or ``sft`` training; starts from ``init`` when given, else from a fresh model."""
    vocab, splits = load_sequences(cfg, data, stack_path, codes_path)
    model = load_model(init)[0] if init else new_model(cfg, vocab)
    streams = training_streams(splits, vocab, cfg.train.max_items)
    tc = cfg.train
    steps, lr = (tc.pt_steps, tc.pt_lr) if mode == "pt" else (tc.sft_steps, tc.sft_lr)
    tag = "pretrain" if mode == "pt" else "sft"
    seed = stage_seed(cfg.seed, "train") + (0 if mode == "pt" else 1)
    torch.manual_seed(seed)
    result = train(model, streams, vocab, mode, steps, lr, tc.batch_size, seed=seed, log_every=tc.log_every,
                   ckpt_every=tc.ckpt_every, ckpt_prefix=str(out / tag), dump_path=str(out / f"{tag}.diverged.ckpt"))
    ckpt, curve = out / f"{tag}.ckpt", out / f"{tag}_curve.csv"
    save_model(ckpt, model, vocab)
    write_curve(curve, result.curve)
    return ckpt, curve


def stage_eval(cfg: PipelineConfig, data: DataPaths, stack_path: Path, codes_path: Path, model_path: Path | None,
               out: Path) -> tuple[Path, dict[str, float]]:
    """Metrics CSV for ``model_path`` (a fresh untrained model when None)."""
    vocab, splits = load_sequences(cfg, data, stack_path, codes_path)
    model = load_model(model_path)[0] if model_path else new_model(cfg, vocab)
    model.eval()
    if cfg.train.negatives:
        codes = read_codes(codes_path, load_stack(stack_path).n_shared)
        records = score_with_negatives(model, splits, vocab, cfg.train.max_items, codes,
                                       seed=stage_seed(cfg.seed, "eval"))
    else:
        records = score_splits(model, splits, vocab, cfg.train.max_items)
    metrics = metric_report(records, splits, cfg.train.cold_threshold, cfg.train.gauc_weighted)
    path = out / "metrics.csv"
    write_metrics(path, metrics)
    return path, metrics


# ---------------------------------------------------------------------------
# orchestration


def run_pipeline(cfg: PipelineConfig, out_dir) -> RunManifest:
    """synth (when no input files) -> align -> tokenize -> pretrain (when pt_steps > 0) -> sft -> eval."""
    problems = validate_config(cfg)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash(cfg), cfg.seed)
    save_config(root / "config.json", cfg)
    manifest.add(root, "config", root / "config.json")

    def run(stage, fn, *args):
        try:
            result = fn(*args)
        except Exception as e:
            manifest.stages[stage] = f"failed: {e}"
            manifest.write(root)
            raise PipelineError(stage, e) from e
        manifest.stages[stage] = "ok"
        return result

    if cfg.ingest.embeddings:
        data = DataPaths(Path(cfg.ingest.embeddings), Path(cfg.ingest.interactions),
                         Path(cfg.ingest.actions) if cfg.ingest.actions else None)
    else:
        data = run("synth", stage_synth, cfg, root / "data")
        for p in (data.embeddings, data.actions, data.interactions):
            manifest.add(root, "synth", p)

    heads = run("align", stage_align, cfg, data.embeddings, root)
    manifest.add(root, "align", heads)
    stack_path, codes_path = run("tokenize", stage_tokenize, cfg, data.embeddings, heads, root)
    manifest.add(root, "tokenize", stack_path)
    manifest.add(root, "tokenize", codes_path)

    init = None
    if cfg.train.pt_steps > 0:
        init, curve = run("pretrain", stage_train, cfg, "pt", data, stack_path, codes_path, root)
        manifest.add(root, "pretrain", init)
        manifest.add(root, "pretrain", curve)
    model_path, curve = run("sft", stage_train, cfg, "sft", data, stack_path, codes_path, root, init)
    manifest.add(root, "sft", model_path)
    manifest.add(root, "sft", curve)
    for extra in sorted(root.glob("*.step*.ckpt")):
        manifest.add(root, "sft" if extra.name.startswith("sft") else "pretrain", extra)
    metrics_path, metrics = run("eval", stage_eval, cfg, data, stack_path, codes_path, model_path, root)
    manifest.add(root, "eval", metrics_path)
    manifest.write(root)
    log.info("run complete: auc %.4f gauc %.4f", metrics["auc"], metrics["gauc"])
    return manifest
