"""Item embeddings, interaction logs and the planted-rule synthetic corpus."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

EMB_MAGIC = "HISAM-EMB"
EMB_VERSION = "v1"

DEFAULT_ACTIONS = ("skip", "click")
POSITIVE_ACTION = 1


class IngestError(ValueError):
    """Malformed input file; ``line`` is 1-based (or the record index for binary bodies)."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class RawItemRecord:
    item_id: str
    vectors: tuple[np.ndarray, ...]


@dataclass
class EmbeddingCorpus:
    """Column-oriented item store: ``modalities[j]`` is an ``(n_items, d_j)`` float32 array."""

    ids: list[str]
    modalities: list[np.ndarray]

    def __post_init__(self):
        if len(self.modalities) < 2:
            raise ValueError("need at least two modalities")
        n = len(self.ids)
        for j, arr in enumerate(self.modalities):
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ValueError(f"modality {j}: expected ({n}, d) array, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"modality {j}: non-finite values")
        if len(set(self.ids)) != n:
            raise ValueError("item ids are not unique")
        self._index = {item_id: i for i, item_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(a.shape[1] for a in self.modalities)

    def index(self, item_id: str) -> int:
        return self._index[item_id]

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def records(self) -> Iterator[RawItemRecord]:
        for i, item_id in enumerate(self.ids):
            yield RawItemRecord(item_id, tuple(a[i] for a in self.modalities))


@dataclass(frozen=True)
class Event:
    item_id: str
    action_id: int
    timestamp: float


@dataclass
class InteractionLog:
    user_id: str
    events: list[Event] = field(default_factory=list)


# ---------------------------------------------------------------------------
# embeddings file


def _emb_header(n_items: int, dims: Sequence[int]) -> str:
    return " ".join([EMB_MAGIC, EMB_VERSION, str(n_items), str(len(dims)), *map(str, dims)])


def _parse_emb_header(line: str) -> tuple[int, tuple[int, ...]]:
    parts = line.split()
    if len(parts) < 4 or parts[0] != EMB_MAGIC or parts[1] != EMB_VERSION:
        raise IngestError(f"expected '{EMB_MAGIC} {EMB_VERSION} ...' header", 1)
    try:
        n_items, n_mod = int(parts[2]), int(parts[3])
        dims = tuple(int(p) for p in parts[4:])
    except ValueError as exc:
        raise IngestError(f"non-integer header field: {exc}", 1) from exc
    if n_mod < 2:
        raise IngestError("need at least two modalities", 1)
    if len(dims) != n_mod or any(d <= 0 for d in dims) or n_items < 0:
        raise IngestError(f"header declares {n_mod} modalities but dims {dims}", 1)
    return n_items, dims


def write_embeddings(path: str | Path, corpus: EmbeddingCorpus, binary: bool = True) -> None:
    dims = corpus.dims
    with open(path, "wb") as fh:
        fh.write((_emb_header(len(corpus), dims) + "\n").encode("utf-8"))
        for i, item_id in enumerate(corpus.ids):
            if not item_id or any(c.isspace() for c in item_id):
                raise ValueError(f"item id {item_id!r} is empty or contains whitespace")
            row = np.concatenate([a[i] for a in corpus.modalities]).astype("<f4")
            if binary:
                fh.write(item_id.encode("utf-8") + b"\n")
                fh.write(row.tobytes())
            else:
                vals = " ".join(f"{float(v):.9g}" for v in row)
                fh.write(f"{item_id} {vals}\n".encode("utf-8"))


def load_embeddings(path: str | Path) -> EmbeddingCorpus:
    """Read a ``HISAM-EMB v1`` file; the body may be binary or whitespace-separated text."""
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    header = fh.readline()
    if not header.endswith(b"\n"):
        raise IngestError("missing header line", 1)
    n_items, dims = _parse_emb_header(header.decode("utf-8", errors="replace"))
    width = sum(dims)
    rows = np.empty((n_items, width), dtype=np.float32)
    ids: list[str] = []
    seen: set[str] = set()

    pos = fh.tell()
    first = fh.readline()
    fh.seek(pos)
    is_text = any(c in first.rstrip(b"\n") for c in b" \t")

    for rec in range(n_items):
        lineno = rec + 2
        raw = fh.readline()
        if not raw:
            raise IngestError(f"expected {n_items} items, found {rec}", lineno)
        if is_text:
            parts = raw.decode("utf-8", errors="replace").split()
            if len(parts) - 1 != width:
                raise IngestError(f"expected {width} floats, got {len(parts) - 1}", lineno)
            try:
                vals = np.array([float(p) for p in parts[1:]], dtype=np.float32)
            except ValueError as exc:
                raise IngestError(str(exc), lineno) from exc
            item_id = parts[0]
        else:
            item_id = raw.rstrip(b"\n").decode("utf-8")
            buf = fh.read(4 * width)
            if len(buf) != 4 * width:
                raise IngestError(f"record {rec}: truncated vector payload", lineno)
            vals = np.frombuffer(buf, dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(vals)):
            raise IngestError(f"non-finite value for item {item_id!r}", lineno)
        if item_id in seen:
            raise IngestError(f"duplicate item id {item_id!r}", lineno)
        seen.add(item_id)
        ids.append(item_id)
        rows[rec] = vals
    trailing = fh.read().strip()
    if trailing:
        raise IngestError(f"trailing data after {n_items} items", n_items + 2)

    splits = np.cumsum(dims)[:-1]
    mods = [np.ascontiguousarray(a) for a in np.split(rows, splits, axis=1)]
    return EmbeddingCorpus(ids, mods)


# ---------------------------------------------------------------------------
# actions and interactions


def load_action_vocab(path: str | Path) -> list[str]:
    names = [ln.strip() for ln in Path(path).read_text().splitlines()]
    names = [n for n in names if n]
    if len(set(names)) != len(names):
        raise IngestError("duplicate action names in vocabulary")
    return names


def write_action_vocab(path: str | Path, actions: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{a}\n" for a in actions))


def load_interactions(
    path: str | Path,
    actions: Sequence[str],
    known_items: EmbeddingCorpus | set[str] | None = None,
    sort: bool = False,
    permissive: bool = False,
) -> list[InteractionLog]:
    """Parse ``user<TAB>item<TAB>action<TAB>timestamp`` lines into per-user logs.

    The action column may hold a vocabulary name or its integer index. Users
    keep their first-appearance order. With ``permissive`` events on unknown
    items are dropped (and logged) instead of rejected.
    """
    action_index = {a: i for i, a in enumerate(actions)}
    logs: dict[str, InteractionLog] = {}
    unknown: list[str] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise IngestError(f"expected 4 tab-separated fields, got {len(parts)}", lineno)
        user, item, action, ts = parts
        if action in action_index:
            aid = action_index[action]
        elif action.isdigit() and int(action) < len(actions):
            aid = int(action)
        else:
            raise IngestError(f"unknown action {action!r}", lineno)
        try:
            t = float(ts)
        except ValueError as exc:
            raise IngestError(f"bad timestamp {ts!r}", lineno) from exc
        if not math.isfinite(t):
            raise IngestError(f"non-finite timestamp {ts!r}", lineno)
        if known_items is not None and item not in known_items:
            if not permissive:
                unknown.append(item)
                continue
            log.warning("line %d: dropping event on unknown item %r", lineno, item)
            continue
        entry = logs.setdefault(user, InteractionLog(user))
        if entry.events and t < entry.events[-1].timestamp and not sort:
            raise IngestError(f"timestamp regression for user {user!r}", lineno)
        entry.events.append(Event(item, aid, t))
    if unknown:
        raise IngestError(f"events reference unknown items: {sorted(set(unknown))}")
    if sort:
        for entry in logs.values():
            entry.events.sort(key=lambda e: e.timestamp)
    return list(logs.values())


def write_interactions(path: str | Path, logs: Sequence[InteractionLog], actions: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for lg in logs:
            for ev in lg.events:
                fh.write(f"{lg.user_id}\t{ev.item_id}\t{actions[ev.action_id]}\t{ev.timestamp:g}\n")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    """Planted-rule generator settings.

    Items belong to ``cluster_count`` latent clusters; each modality vector is
    the cluster's per-modality centroid plus isotropic noise, then normalized.
    ``style_count > 0`` adds an independent per-modality style factor so each
    modality also carries information the others lack.

    Users belong to ``n_groups`` preference groups. A user draws items from the
    group's liked clusters with probability ``affinity`` (uniform otherwise),
    and the positive action fires with probability ``action_rule[group, cluster]``.
    When ``action_rule`` is None, group g likes clusters with
    ``c % max(n_groups, 2) == g`` (probability ``p_like``) and dislikes the rest
    (``p_dislike``). The default single group makes the action a function of the
    item's cluster alone; more groups turn it into a user-by-item interaction.
    """

    n_items: int = 500
    n_users: int = 2000
    n_modalities: int = 3
    dims: tuple[int, ...] = (24, 32, 16)
    cluster_count: int = 8
    noise_scale: float = 0.3
    style_count: int = 0
    style_scale: float = 0.6
    n_groups: int = 1
    affinity: float = 0.5
    p_like: float = 0.95
    p_dislike: float = 0.05
    action_rule: np.ndarray | None = None
    min_events: int = 6
    max_events: int = 30
    seed: int = 0

    def validate(self) -> None:
        if self.cluster_count < 2:
            raise ValueError("cluster_count must be >= 2")
        if self.n_modalities < 2 or len(self.dims) != self.n_modalities:
            raise ValueError("dims must list one size per modality (>= 2 modalities)")
        if not 1 <= self.min_events <= self.max_events:
            raise ValueError("need 1 <= min_events <= max_events")
        if self.n_groups < 1 or self.noise_scale < 0:
            raise ValueError("n_groups >= 1 and noise_scale >= 0 required")

    def rule(self) -> np.ndarray:
        if self.action_rule is not None:
            rule = np.asarray(self.action_rule, dtype=np.float64)
            if rule.shape != (self.n_groups, self.cluster_count):
                raise ValueError(f"action_rule must be ({self.n_groups}, {self.cluster_count})")
            return rule
        c = np.arange(self.cluster_count)
        liked = (c[None, :] % max(self.n_groups, 2)) == np.arange(self.n_groups)[:, None]
        return np.where(liked, self.p_like, self.p_dislike)


@dataclass
class PlantedLabels:
    item_cluster: np.ndarray
    item_style: np.ndarray  # (n_items, n_modalities), -1 when styles are off
    user_group: dict[str, int]
    action_rule: np.ndarray
    centroids: list[np.ndarray]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def synth_corpus(spec: SyntheticSpec) -> tuple[EmbeddingCorpus, list[InteractionLog], PlantedLabels]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, M = spec.cluster_count, spec.n_modalities

    centroids = [_unit_rows(rng.standard_normal((C, d))) for d in spec.dims]
    cluster = rng.integers(0, C, size=spec.n_items)
    if spec.style_count > 0:
        style_dirs = [_unit_rows(rng.standard_normal((spec.style_count, d))) for d in spec.dims]
        style = rng.integers(0, spec.style_count, size=(spec.n_items, M))
    else:
        style = np.full((spec.n_items, M), -1)

    mods = []
    for j, d in enumerate(spec.dims):
        x = centroids[j][cluster].copy()
        if spec.style_count > 0:
            x += spec.style_scale * style_dirs[j][style[:, j]]
        x += spec.noise_scale * rng.standard_normal((spec.n_items, d)) / math.sqrt(d)
        mods.append(_unit_rows(x).astype(np.float32))

    width = len(str(max(spec.n_items - 1, 0)))
    ids = [f"i{i:0{width}d}" for i in range(spec.n_items)]
    corpus = EmbeddingCorpus(ids, mods)

    rule = spec.rule()
    members = [np.flatnonzero(cluster == c) for c in range(C)]
    nonempty = np.array([len(m) > 0 for m in members])
    liked = [np.flatnonzero((rule[g] >= rule[g].max()) & nonempty) for g in range(spec.n_groups)]
    everything = np.flatnonzero(nonempty)

    logs = []
    groups: dict[str, int] = {}
    uwidth = len(str(max(spec.n_users - 1, 0)))
    for u in range(spec.n_users):
        uid = f"u{u:0{uwidth}d}"
        g = int(rng.integers(0, spec.n_groups))
        groups[uid] = g
        n_ev = int(rng.integers(spec.min_events, spec.max_events + 1))
        events = []
        for t in range(n_ev):
            pool = liked[g] if (rng.random() < spec.affinity and len(liked[g])) else everything
            c = int(pool[rng.integers(0, len(pool))])
            item = int(members[c][rng.integers(0, len(members[c]))])
            a = POSITIVE_ACTION if rng.random() < rule[g, c] else 1 - POSITIVE_ACTION
            events.append(Event(ids[item], a, float(t)))
        logs.append(InteractionLog(uid, events))

    labels = PlantedLabels(cluster, style, groups, rule, centroids)
    return corpus, logs, labels
