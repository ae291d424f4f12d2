"""Disentangled modal-residual quantization.

An item's aligned modality vectors are fused and residual-quantized through
``n_shared`` shared codebooks. The leftover residual is split into ``H``
subspaces, each modality vector attends over them (PSGR) to recover its own
detail, and that recovered vector is quantized by the modality's codebook.
A vCLUB penalty discourages the recovered vectors from carrying information
already present in the shared reconstruction.

Residual arithmetic runs in float64 on float32 parameters, so
``f == z_hat_sh + r`` holds exactly for the summation order used here.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .cga import AlignedCorpus, TrainingDivergedError
from .tensorio import FormatError, read_named_tensors, write_named_tensors

log = logging.getLogger(__name__)

CB_MAGIC = "HISAM-CB"
CB_VERSION = "v1"
LOG_2PI = math.log(2 * math.pi)


@dataclass
class DMRQConfig:
    n_shared: int = 3
    codebook_size: int = 64
    n_heads: int = 4
    beta: float = 1.0
    lam: float = 0.1
    gamma: float = 0.25
    fuse: str = "mean"
    lr: float = 1e-3
    estimator_lr: float = 2e-3
    estimator_hidden: int = 64
    codebook_lr_scale: float = 0.1  # k-means seeded entries only need small corrections
    epochs: int = 20
    batch_size: int = 64
    reseed_dead: bool = True
    seed: int = 0

    def validate(self, d: int | None = None) -> None:
        if self.beta < 0 or self.lam < 0 or self.gamma < 0:
            raise ValueError("beta, lam and gamma must be non-negative")
        if self.n_shared < 1 or self.codebook_size < 2:
            raise ValueError("need n_shared >= 1 and codebook_size >= 2")
        if self.fuse not in ("mean", "linear"):
            raise ValueError(f"unknown fuse mode {self.fuse!r}")
        if d is not None and d % self.n_heads:
            raise ValueError(f"H={self.n_heads} must divide d={d}")


@dataclass
class Codebook:
    entries: torch.Tensor  # (V, d)
    layer_id: int
    kind: str  # "shared" or "specific:<modality>"


class Fuse(nn.Module):
    """Mean pooling, or a learned linear fusion initialized to the mean."""

    def __init__(self, n_modalities: int, d: int, mode: str = "mean"):
        super().__init__()
        self.mode = mode
        self.n_modalities = n_modalities
        if mode == "linear":
            w = torch.cat([torch.eye(d) / n_modalities] * n_modalities, dim=1)
            self.weight = nn.Parameter(w)
            self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if self.mode == "mean":
            return z.mean(dim=-2)
        flat = z.reshape(*z.shape[:-2], -1)
        return flat @ self.weight.T + self.bias


class PSGR(nn.Module):
    """Probe-guided attention over ``H`` subspaces of the shared residual.

    The residual is projected to keys/values of shape ``(H, d_h)``; the probe
    gets a per-head query. Softmax over the H scores gates each value head,
    and the gated heads are concatenated and output-projected back to ``d``.
    """

    def __init__(self, d: int, n_heads: int, generator: torch.Generator | None = None):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"H={n_heads} must divide d={d}")
        self.d, self.n_heads, self.d_head = d, n_heads, d // n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        bound = 1.0 / math.sqrt(d)
        with torch.no_grad():
            for lin in (self.q, self.k, self.v, self.o):
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.uniform_(-bound, bound, generator=generator)
            # start near identity on the value path so the recovered vector tracks the residual
            self.v.weight.add_(torch.eye(d))
            self.o.weight.add_(torch.eye(d))
            self.v.bias.zero_()
            self.o.bias.zero_()

    def attention_weights(self, residual: torch.Tensor, probe: torch.Tensor) -> torch.Tensor:
        H, dh = self.n_heads, self.d_head
        k = self.k(residual).unflatten(-1, (H, dh))
        q = self.q(probe).unflatten(-1, (H, dh))
        return torch.softmax((q * k).sum(-1) / math.sqrt(dh), dim=-1)

    def forward(self, residual: torch.Tensor, probe: torch.Tensor) -> torch.Tensor:
        dtype = self.k.weight.dtype
        residual, probe = residual.to(dtype), probe.to(dtype)
        a = self.attention_weights(residual, probe)
        v = self.v(residual).unflatten(-1, (self.n_heads, self.d_head))
        return self.o((a[..., None] * v).flatten(-2))


class CodebookStack(nn.Module):
    def __init__(self, n_shared: int, n_modalities: int, codebook_size: int, d: int, n_heads: int,
                 fuse: str = "mean", generator: torch.Generator | None = None):
        super().__init__()
        self.d = d
        self.shared = nn.ParameterList(
            [nn.Parameter(0.1 * torch.randn(codebook_size, d, generator=generator)) for _ in range(n_shared)]
        )
        self.specific = nn.ParameterList(
            [nn.Parameter(0.1 * torch.randn(codebook_size, d, generator=generator)) for _ in range(n_modalities)]
        )
        self.fuse = Fuse(n_modalities, d, fuse)
        self.psgr = PSGR(d, n_heads, generator=generator)

    @property
    def n_shared(self) -> int:
        return len(self.shared)

    @property
    def n_modalities(self) -> int:
        return len(self.specific)

    @property
    def n_codes(self) -> int:
        return self.n_shared + self.n_modalities

    def codebooks(self) -> list[Codebook]:
        books = [Codebook(e, k, "shared") for k, e in enumerate(self.shared)]
        books += [Codebook(e, self.n_shared + j, f"specific:{j}") for j, e in enumerate(self.specific)]
        return books

    @classmethod
    def from_config(cls, cfg: DMRQConfig, n_modalities: int, d: int) -> "CodebookStack":
        gen = torch.Generator().manual_seed(cfg.seed)
        return cls(cfg.n_shared, n_modalities, cfg.codebook_size, d, cfg.n_heads, cfg.fuse, gen)


# ---------------------------------------------------------------------------
# quantization primitives


def fuse(z: torch.Tensor, fuse_module: Fuse | None = None) -> torch.Tensor:
    """Global representation of an aligned set ``z`` of shape ``(..., N_m, d)``."""
    return z.mean(dim=-2) if fuse_module is None else fuse_module(z)


def nearest_entry(x: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Index of the closest codebook row for each ``x``; ties go to the lowest index."""
    x64, e64 = x.detach().double(), entries.detach().double()
    dist = ((x64[..., None, :] - e64) ** 2).sum(-1)
    return dist.argmin(dim=-1)


@dataclass
class SharedQuantization:
    codes: torch.Tensor  # (..., N_sh) long
    z_hat: torch.Tensor  # (..., d) float64
    residual: torch.Tensor  # (..., d) float64
    inputs: list[torch.Tensor]  # r_{k-1} per layer
    chosen: list[torch.Tensor]  # selected entry per layer


def _quantize_shared(f: torch.Tensor, books, codes: torch.Tensor | None = None,
                     detach_chain: bool = False) -> SharedQuantization:
    r = f.double()
    z_hat = torch.zeros_like(r)
    inputs, chosen, picked = [], [], []
    for k, entries in enumerate(books):
        c = nearest_entry(r, entries) if codes is None else codes[..., k]
        e = entries.double()[c]
        inputs.append(r)
        chosen.append(e)
        picked.append(c)
        z_hat = z_hat + e
        # later layers must not push gradients into earlier entries while training
        r = r - (e.detach() if detach_chain else e)
    return SharedQuantization(torch.stack(picked, dim=-1), z_hat, r, inputs, chosen)


def residual_quantize_shared(f: torch.Tensor, books) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Greedy residual quantization; returns ``(codes, z_hat_sh, final_residual)``."""
    q = _quantize_shared(f, list(books))
    return q.codes, q.z_hat, q.residual


def psgr_recover(residual: torch.Tensor, probe: torch.Tensor, psgr: PSGR) -> torch.Tensor:
    return psgr(residual, probe)


def quantize_specific(z_sp: torch.Tensor, entries: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    c = nearest_entry(z_sp, entries)
    return c, entries[c]


# ---------------------------------------------------------------------------
# mutual information


class VariationalEstimator(nn.Module):
    """Diagonal Gaussian ``q(x | z) = N(mu(z), exp(logvar(z)))``."""

    def __init__(self, d: int, hidden: int = 64, d_out: int | None = None, generator: torch.Generator | None = None):
        super().__init__()
        d_out = d_out or d
        self.mu = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, d_out))
        self.logvar = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, d_out), nn.Tanh())
        if generator is not None:
            with torch.no_grad():
                for p in self.parameters():
                    bound = 1.0 / math.sqrt(p.shape[-1])
                    p.uniform_(-bound, bound, generator=generator)
        self.logvar_scale = 4.0  # logvar in (-4, 4)

    def params(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.mu(z), self.logvar_scale * self.logvar(z)

    def log_likelihood(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Per-sample ``log q(x_k | z_k)``."""
        mu, logvar = self.params(z)
        return -0.5 * (((x - mu) ** 2) / logvar.exp() + logvar + LOG_2PI).sum(-1)

    def pairwise_log_likelihood(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """``L[k, l] = log q(x_l | z_k)``."""
        mu, logvar = self.params(z)
        diff = x[None, :, :] - mu[:, None, :]
        return -0.5 * ((diff**2) / logvar.exp()[:, None, :] + logvar[:, None, :] + LOG_2PI).sum(-1)


def vclub_estimate(z_sh: torch.Tensor, z_sp: torch.Tensor, estimator: VariationalEstimator) -> torch.Tensor:
    """Batch vCLUB upper bound on I(z_sh; z_sp)."""
    dtype = next(estimator.parameters()).dtype
    L = estimator.pairwise_log_likelihood(z_sp.to(dtype), z_sh.to(dtype))
    return L.diagonal().mean() - L.mean()


def fit_estimator_step(estimator: VariationalEstimator, z_sh: torch.Tensor, z_sp: torch.Tensor,
                       optimizer: torch.optim.Optimizer) -> float:
    """One likelihood-ascent step on detached inputs; returns the pre-step mean log-likelihood."""
    if z_sh.shape[0] == 0:
        raise ValueError("empty batch")
    dtype = next(estimator.parameters()).dtype
    ll = estimator.log_likelihood(z_sp.detach().to(dtype), z_sh.detach().to(dtype)).mean()
    optimizer.zero_grad()
    (-ll).backward()
    optimizer.step()
    return ll.item()


# ---------------------------------------------------------------------------
# objective


@dataclass
class Encoded:
    f: torch.Tensor
    shared: SharedQuantization
    z_sp: torch.Tensor  # (B, N_m, d) recovered, continuous
    sp_codes: torch.Tensor  # (B, N_m)
    z_hat_sp: torch.Tensor  # (B, N_m, d) quantized


def encode(z: torch.Tensor, stack: CodebookStack, codes: torch.Tensor | None = None,
           detach_chain: bool = False) -> Encoded:
    """Full differentiable encoding of a batch ``z`` of shape ``(B, N_m, d)``.

    ``codes`` (shape ``(B, N_sh + N_m)``) pins the selections instead of searching.
    """
    f = stack.fuse(z)
    shared = _quantize_shared(f, list(stack.shared), None if codes is None else codes[:, : stack.n_shared], detach_chain)
    z_sp = torch.stack([stack.psgr(shared.residual, z[:, j]) for j in range(stack.n_modalities)], dim=1)
    sp_codes, z_hat_sp = [], []
    for j, entries in enumerate(stack.specific):
        c = nearest_entry(z_sp[:, j], entries) if codes is None else codes[:, stack.n_shared + j]
        sp_codes.append(c)
        z_hat_sp.append(entries[c])
    return Encoded(f, shared, z_sp, torch.stack(sp_codes, dim=1), torch.stack(z_hat_sp, dim=1))


def _sqnorm(x: torch.Tensor) -> torch.Tensor:
    return (x**2).sum(-1)


def dmrq_loss(z: torch.Tensor, stack: CodebookStack, estimators, beta: float = 1.0, lam: float = 0.1,
              gamma: float = 0.25, codes: torch.Tensor | None = None, straight_through: bool = True,
              enc: Encoded | None = None) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Reconstruction + beta * (shared + specific VQ terms) + lam * sum_j vCLUB.

    With ``straight_through`` the quantized vectors pass encoder gradients
    unchanged (and the reconstruction term sends nothing to the codebooks).
    Without it the quantized vectors are the raw codebook rows, which makes
    the loss an ordinary function of every parameter for fixed ``codes``.
    """
    if beta < 0 or lam < 0 or gamma < 0:
        raise ValueError("beta, lam and gamma must be non-negative")
    enc = enc if enc is not None else encode(z, stack, codes)
    sh = enc.shared
    if straight_through:
        f64 = enc.f.double()
        z_hat_sh = f64 + (sh.z_hat - f64).detach()
        z_hat_sp = enc.z_sp + (enc.z_hat_sp - enc.z_sp).detach()
    else:
        z_hat_sh, z_hat_sp = sh.z_hat, enc.z_hat_sp

    recon = _sqnorm(z.double() - (z_hat_sh[:, None, :] + z_hat_sp.double())).sum(-1).mean()

    vq_sh = sum(
        (_sqnorm(r.detach() - e) + gamma * _sqnorm(r - e.detach())).mean() for r, e in zip(sh.inputs, sh.chosen)
    )
    vq_sp = (
        _sqnorm(enc.z_sp.detach() - enc.z_hat_sp) + gamma * _sqnorm(enc.z_sp - enc.z_hat_sp.detach())
    ).sum(-1).mean()

    if lam > 0 and estimators is not None:
        mi = sum(vclub_estimate(z_hat_sh, enc.z_sp[:, j], est) for j, est in enumerate(estimators))
    else:
        mi = torch.zeros((), dtype=torch.float64)
    total = recon + beta * (vq_sh + vq_sp) + lam * mi
    components = {
        "reconstruction": recon,
        "vq_shared": vq_sh if torch.is_tensor(vq_sh) else torch.zeros(()),
        "vq_specific": vq_sp,
        "mi": mi,
        "total": total,
    }
    return total, components


# ---------------------------------------------------------------------------
# training


def kmeans_pp(points: torch.Tensor, k: int, generator: torch.Generator) -> torch.Tensor:
    """k-means++ seeding (D^2 sampling); duplicates allowed when points run out."""
    pts = points.detach().double()
    n = pts.shape[0]
    first = torch.randint(n, (1,), generator=generator).item()
    centers = [pts[first]]
    d2 = _sqnorm(pts - centers[0])
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = torch.randint(n, (1,), generator=generator).item()
        else:
            idx = torch.multinomial(d2 / total, 1, generator=generator).item()
        centers.append(pts[idx])
        d2 = torch.minimum(d2, _sqnorm(pts - pts[idx]))
    return torch.stack(centers)


@dataclass
class DMRQResult:
    stack: CodebookStack
    estimators: nn.ModuleList
    history: list[dict] = field(default_factory=list)


def make_estimators(n_modalities: int, d: int, cfg: DMRQConfig) -> nn.ModuleList:
    gen = torch.Generator().manual_seed(cfg.seed + 7)
    return nn.ModuleList([VariationalEstimator(d, cfg.estimator_hidden, generator=gen) for _ in range(n_modalities)])


def init_codebooks(stack: CodebookStack, z: torch.Tensor, generator: torch.Generator) -> None:
    """Seed every codebook with k-means++ on the inputs it sees for the batch ``z``."""
    with torch.no_grad():
        r = stack.fuse(z).double()
        for entries in stack.shared:
            entries.copy_(kmeans_pp(r, entries.shape[0], generator))
            r = r - entries.double()[nearest_entry(r, entries)]
        for j, entries in enumerate(stack.specific):
            z_sp = stack.psgr(r, z[:, j])
            entries.copy_(kmeans_pp(z_sp, entries.shape[0], generator))


def reconstruction_error(z: torch.Tensor, stack: CodebookStack) -> float:
    with torch.no_grad():
        enc = encode(z, stack)
        recon = _sqnorm(z.double() - (enc.shared.z_hat[:, None, :] + enc.z_hat_sp.double())).sum(-1).mean()
    return recon.item()


def train_dmrq(aligned: AlignedCorpus, cfg: DMRQConfig, stack: CodebookStack | None = None) -> DMRQResult:
    """Alternate estimator likelihood ascent with descent on the quantization objective."""
    z_all = aligned.z.detach().float()
    n, M, d = z_all.shape
    cfg.validate(d)
    if n == 0:
        raise ValueError("cannot train on an empty corpus")
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    stack = stack if stack is not None else CodebookStack.from_config(cfg, M, d)
    estimators = make_estimators(M, d, cfg)
    history: list[dict] = []
    if cfg.epochs == 0:
        return DMRQResult(stack, estimators, history)

    init_n = min(n, max(cfg.batch_size, 4 * cfg.codebook_size))
    init_codebooks(stack, z_all[torch.randperm(n, generator=gen)[:init_n]], gen)

    books = list(stack.shared) + list(stack.specific)
    book_ids = {id(p) for p in books}
    network = [p for p in stack.parameters() if id(p) not in book_ids]
    opt = torch.optim.Adam([{"params": network}, {"params": books, "lr": cfg.lr * cfg.codebook_lr_scale}], lr=cfg.lr)
    est_opt = torch.optim.Adam(estimators.parameters(), lr=cfg.estimator_lr)
    B = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        usage = torch.zeros(stack.n_codes, cfg.codebook_size, dtype=torch.long)
        last_inputs = None
        sums: dict[str, float] = {}
        perm = torch.randperm(n, generator=gen)
        n_batches = 0
        for start in range(0, n, B):
            zb = z_all[perm[start : start + B]]
            enc = encode(zb, stack, detach_chain=True)
            if cfg.lam > 0:
                for j, est in enumerate(estimators):
                    fit_estimator_step(est, enc.shared.z_hat, enc.z_sp[:, j], est_opt)
            loss, comps = dmrq_loss(zb, stack, estimators, cfg.beta, cfg.lam, cfg.gamma, enc=enc)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"dmrq loss became {loss.item()} in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            codes = torch.cat([enc.shared.codes, enc.sp_codes], dim=1)
            for layer in range(stack.n_codes):
                usage[layer] += torch.bincount(codes[:, layer], minlength=cfg.codebook_size)
            last_inputs = [r.detach() for r in enc.shared.inputs] + [enc.z_sp[:, j].detach() for j in range(M)]
            for key, val in comps.items():
                sums[key] = sums.get(key, 0.0) + val.item()
            n_batches += 1

        dead = (usage == 0).sum(dim=1)
        if dead.any():
            log.warning("epoch %d: dead codes per layer %s", epoch, dead.tolist())
            if cfg.reseed_dead:
                _reseed(stack, usage, last_inputs, gen)
        entry = {k: v / n_batches for k, v in sums.items()}
        entry.update(epoch=epoch, usage=usage.tolist(), dead=dead.tolist(),
                     eval_reconstruction=reconstruction_error(z_all, stack))
        history.append(entry)
        log.info("dmrq epoch %d: recon %.5f total %.5f", epoch, entry["eval_reconstruction"], entry["total"])
    return DMRQResult(stack, estimators, history)


def _reseed(stack: CodebookStack, usage: torch.Tensor, inputs: list[torch.Tensor], gen: torch.Generator) -> None:
    books = list(stack.shared) + list(stack.specific)
    with torch.no_grad():
        for layer, entries in enumerate(books):
            dead = torch.nonzero(usage[layer] == 0).flatten()
            if len(dead) == 0:
                continue
            pool = inputs[layer]
            pick = torch.randint(pool.shape[0], (len(dead),), generator=gen)
            entries[dead] = pool[pick].to(entries.dtype)


# ---------------------------------------------------------------------------
# tokenization


@dataclass
class ItemCodes:
    item_id: str
    c_sh: list[int]
    c_sp: list[int]
    z_hat_sh: np.ndarray  # float64
    z_hat_sp: list[np.ndarray]

    @property
    def codes(self) -> list[int]:
        return list(self.c_sh) + list(self.c_sp)


def tokenize(aligned: AlignedCorpus, stack: CodebookStack, batch_size: int = 1024) -> list[ItemCodes]:
    """Codes per item: shared layers ascending, then modalities ascending."""
    out = []
    with torch.no_grad():
        for start in range(0, len(aligned), batch_size):
            zb = aligned.z[start : start + batch_size].to(stack.shared[0].dtype)
            enc = encode(zb, stack)
            for b in range(zb.shape[0]):
                out.append(
                    ItemCodes(
                        aligned.ids[start + b],
                        enc.shared.codes[b].tolist(),
                        enc.sp_codes[b].tolist(),
                        enc.shared.z_hat[b].numpy(),
                        [enc.z_hat_sp[b, j].double().numpy() for j in range(stack.n_modalities)],
                    )
                )
    return out


def reconstruct(codes: ItemCodes, stack: CodebookStack) -> tuple[np.ndarray, list[np.ndarray]]:
    """Recompute ``(z_hat_sh, [z_hat_sp_j])`` from the integer codes alone."""
    with torch.no_grad():
        z_hat = torch.zeros(stack.d, dtype=torch.float64)
        for k, c in enumerate(codes.c_sh):
            z_hat = z_hat + stack.shared[k].double()[c]
        sp = [stack.specific[j].double()[c].numpy() for j, c in enumerate(codes.c_sp)]
    return z_hat.numpy(), sp


def write_codes(path, codes: list[ItemCodes]) -> None:
    with open(path, "w") as fh:
        for ic in codes:
            fh.write(f"{ic.item_id}\t{','.join(map(str, ic.codes))}\n")


def read_codes(path, n_shared: int) -> dict[str, list[int]]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                item, csv = line.rstrip("\n").split("\t")
                out[item] = [int(c) for c in csv.split(",")]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad code line") from exc
    return out


# ---------------------------------------------------------------------------
# diagnostics


def linear_cka(x: torch.Tensor | np.ndarray, y: torch.Tensor | np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x = x - x.mean(0)
    y = y - y.mean(0)
    num = np.linalg.norm(y.T @ x) ** 2
    den = np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)
    return float(num / den) if den > 0 else 0.0


def layer_similarity(aligned: AlignedCorpus, stack: CodebookStack) -> np.ndarray:
    """Linear CKA between each layer's code embedding and each modality input.

    Rows are the ``N_sh + N_m`` code layers (shared layers first), columns the
    modalities. A disentangled stack puts each specific row's maximum on its
    own modality.
    """
    with torch.no_grad():
        z = aligned.z.to(stack.shared[0].dtype)
        enc = encode(z, stack)
        layers = [e.numpy() for e in enc.shared.chosen] + [enc.z_hat_sp[:, j].double().numpy() for j in range(stack.n_modalities)]
        mods = [z[:, j].double().numpy() for j in range(stack.n_modalities)]
    return np.array([[linear_cka(layer, m) for m in mods] for layer in layers])


def shared_specific_cka(aligned: AlignedCorpus, stack: CodebookStack) -> float:
    """Mean linear CKA between the shared reconstruction and each recovered specific vector."""
    with torch.no_grad():
        enc = encode(aligned.z.to(stack.shared[0].dtype), stack)
        sh = enc.shared.z_hat.numpy()
        return float(np.mean([linear_cka(sh, enc.z_sp[:, j].double().numpy()) for j in range(stack.n_modalities)]))


# ---------------------------------------------------------------------------
# persistence


def save_stack(path, stack: CodebookStack) -> None:
    sizes = [e.shape[0] for e in list(stack.shared) + list(stack.specific)]
    header = [CB_MAGIC, CB_VERSION, stack.n_shared, stack.n_modalities, *sizes,
              stack.d, stack.psgr.n_heads, stack.psgr.d_head]
    with open(path, "wb") as fh:
        fh.write((" ".join(map(str, header)) + "\n").encode("ascii"))
        write_named_tensors(fh, dict(stack.state_dict()), {"fuse": stack.fuse.mode})


def load_stack(path) -> CodebookStack:
    with open(path, "rb") as fh:
        parts = fh.readline().decode("ascii", errors="replace").split()
        if len(parts) < 4 or parts[0] != CB_MAGIC or parts[1] != CB_VERSION:
            raise FormatError(f"{path}: not a {CB_MAGIC} {CB_VERSION} file")
        n_sh, n_m = int(parts[2]), int(parts[3])
        sizes = [int(p) for p in parts[4 : 4 + n_sh + n_m]]
        d, H, d_h = (int(p) for p in parts[4 + n_sh + n_m :])
        if H * d_h != d:
            raise FormatError(f"{path}: H * d_h != d")
        meta, tensors = read_named_tensors(fh)
    if len(set(sizes)) != 1:
        raise FormatError("mixed codebook sizes are not supported")
    stack = CodebookStack(n_sh, n_m, sizes[0], d, H, meta.get("fuse", "mean"))
    stack.load_state_dict(tensors)
    return stack
