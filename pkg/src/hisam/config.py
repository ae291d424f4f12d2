"""Pipeline configuration: JSON text with strict key checking.

Per-stage seeds are not part of the file; they are derived from the root
``seed`` so one number controls every random draw.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .cga import AlignConfig
from .dmrq import DMRQConfig
from .hmat import ModelConfig
from .ingest import SyntheticSpec
from .train_eval import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class IngestSection:
    """Input files; an empty ``embeddings`` path means generate a synthetic corpus."""

    embeddings: str = ""
    interactions: str = ""
    actions: str = ""
    sort_events: bool = False
    permissive: bool = False
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class StreamSection:
    profile_len: int = 6
    profile_buckets: int = 256


@dataclass
class ServeSection:
    max_candidates: int = 64


@dataclass
class PipelineConfig:
    seed: int = 0
    ingest: IngestSection = field(default_factory=IngestSection)
    align: AlignConfig = field(default_factory=AlignConfig)
    dmrq: DMRQConfig = field(default_factory=DMRQConfig)
    stream: StreamSection = field(default_factory=StreamSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    serve: ServeSection = field(default_factory=ServeSection)


# fields owned by the pipeline rather than the file
HIDDEN = {("align", "seed"), ("dmrq", "seed"), ("train", "seed"), ("model", "vocab_size"),
          ("synthetic", "seed")}

STAGES = ("synth", "align", "dmrq", "model", "train", "eval", "serve")


def stage_seed(root: int, stage: str) -> int:
    """Deterministic 31-bit seed for ``stage`` from the root seed."""
    idx = STAGES.index(stage)
    return int(np.random.SeedSequence([root, idx]).generate_state(1)[0] & 0x7FFFFFFF)


def _to_plain(obj, section: str = ""):
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            if (section, f.name) in HIDDEN:
                continue
            out[f.name] = _to_plain(getattr(obj, f.name), f.name)
        return out
    if isinstance(obj, tuple):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def to_dict(cfg: PipelineConfig) -> dict:
    return _to_plain(cfg)


def _from_plain(cls, data, section: str, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls) if (section, f.name) not in HIDDEN}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _from_plain(type(current), value, name, where)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected true/false")
            kwargs[name] = value
        elif isinstance(current, int) and (not isinstance(value, int) or isinstance(value, bool)):
            raise ConfigError(f"{where}: expected an integer")
        elif isinstance(current, float) and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            raise ConfigError(f"{where}: expected a number")
        else:
            kwargs[name] = float(value) if isinstance(current, float) else value
    return cls(**kwargs)


def from_dict(data: dict) -> PipelineConfig:
    return _from_plain(PipelineConfig, data, "", "")


def dumps(cfg: PipelineConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> PipelineConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return from_dict(data)


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return loads(fh.read())


def save_config(path, cfg: PipelineConfig) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()


def validate_config(cfg: PipelineConfig) -> list[str]:
    """Every violated precondition, as human-readable strings; empty when the config is usable."""
    out = []
    a, q = cfg.align, cfg.dmrq
    if a.tau <= 0:
        out.append("align.tau must be > 0")
    if a.d < 2:
        out.append("align.d must be >= 2")
    if a.batch_size < 1 or a.steps < 0:
        out.append("align.batch_size must be >= 1 and align.steps >= 0")
    if a.anchor_modality < 0 or a.anchor_modality >= cfg.ingest.synthetic.n_modalities and not cfg.ingest.embeddings:
        out.append("align.anchor_modality out of range")
    if q.beta < 0:
        out.append("dmrq.beta must be >= 0")
    if q.lam < 0:
        out.append("dmrq.lam must be >= 0")
    if q.gamma < 0:
        out.append("dmrq.gamma must be >= 0")
    if q.n_shared < 1:
        out.append("dmrq.n_shared must be >= 1")
    if q.codebook_size < 2:
        out.append("dmrq.codebook_size must be >= 2")
    if q.n_heads < 1 or a.d % q.n_heads:
        out.append("dmrq.n_heads must divide align.d (H * d_h = d)")
    if q.fuse not in ("mean", "linear"):
        out.append("dmrq.fuse must be 'mean' or 'linear'")
    if q.epochs < 0 or q.batch_size < 1:
        out.append("dmrq.epochs must be >= 0 and dmrq.batch_size >= 1")
    if cfg.stream.profile_len < 0 or cfg.stream.profile_buckets < 1:
        out.append("stream.profile_len must be >= 0 and stream.profile_buckets >= 1")
    model = dataclasses.replace(cfg.model, vocab_size=1)
    out += model.violations()
    out += cfg.train.violations()
    n_codes = q.n_shared + (cfg.ingest.synthetic.n_modalities if not cfg.ingest.embeddings else 1)
    per_item = n_codes + 2
    if cfg.stream.profile_len + per_item > cfg.model.max_len:
        out.append("model.max_len cannot hold the profile and one item")
    if cfg.serve.max_candidates < 1:
        out.append("serve.max_candidates must be >= 1")
    if not cfg.ingest.embeddings:
        try:
            cfg.ingest.synthetic.validate()
        except ValueError as e:
            out.append(f"ingest.synthetic: {e}")
    elif not cfg.ingest.interactions:
        out.append("ingest.interactions is required with ingest.embeddings")
    return out


def test_profile(seed: int = 0) -> PipelineConfig:
    """Small settings that train in minutes on one CPU core."""
    cfg = PipelineConfig(seed=seed)
    cfg.ingest.synthetic = SyntheticSpec(n_items=200, n_users=300, style_count=4, style_scale=2.0)
    cfg.align = AlignConfig(d=32, steps=150)
    cfg.dmrq = DMRQConfig(codebook_size=32, epochs=5)
    cfg.model = ModelConfig(width=64, n_layers=2, n_heads=4, n_kv_heads=2)
    cfg.train = TrainConfig(pt_steps=50, sft_steps=100, pt_lr=2e-3, sft_lr=1e-3, batch_size=16, max_items=12)
    return cfg
