"""Named-tensor container shared by the checkpoint and codebook file formats.

Layout after the caller's magic line::

    <json metadata>\n
    <count>\n
    repeated <count> times:
        <name> <ndim> <dim_0> ... <dim_{ndim-1}>\n
        row-major little-endian float32 payload
"""

from __future__ import annotations

import json
from typing import BinaryIO

import numpy as np
import torch


class FormatError(ValueError):
    pass


def _readline(fh: BinaryIO, what: str) -> str:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise FormatError(f"truncated file while reading {what}")
    return line[:-1].decode("utf-8")


def write_named_tensors(fh: BinaryIO, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    fh.write((json.dumps(meta or {}, sort_keys=True) + "\n").encode("utf-8"))
    fh.write(f"{len(tensors)}\n".encode("ascii"))
    for name, t in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = t.detach().to("cpu", torch.float32).contiguous().numpy()
        dims = " ".join(str(s) for s in arr.shape)
        fh.write(f"{name} {arr.ndim} {dims}".rstrip().encode("utf-8") + b"\n")
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_named_tensors(fh: BinaryIO) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        meta = json.loads(_readline(fh, "metadata"))
        count = int(_readline(fh, "tensor count"))
    except (json.JSONDecodeError, ValueError) as exc:
        raise FormatError(f"bad container header: {exc}") from exc
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        parts = _readline(fh, "tensor header").split()
        if len(parts) < 2:
            raise FormatError(f"bad tensor header {parts!r}")
        name, ndim = parts[0], int(parts[1])
        shape = tuple(int(s) for s in parts[2:])
        if len(shape) != ndim:
            raise FormatError(f"tensor {name}: declared ndim {ndim} but {len(shape)} dims")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        buf = fh.read(nbytes)
        if len(buf) != nbytes:
            raise FormatError(f"tensor {name}: truncated payload")
        arr = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
        out[name] = torch.from_numpy(arr.copy())
    return meta, out


CKPT_MAGIC = b"HISAM-CKPT v1\n"


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        write_named_tensors(fh, tensors, meta)


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        if fh.readline() != CKPT_MAGIC:
            raise FormatError(f"{path}: not a HISAM-CKPT v1 file")
        return read_named_tensors(fh)
