"""Versioned binary checkpoints.

Layout: magic ``CKD1``, then sections ``tag(4) | length(u64 LE) | payload``,
closed by an ``END!`` section holding the CRC32 of everything before it.

    SPEC  model kind + network spec as flat config text
    PARM  parameter tensors
    BUFR  batchnorm running statistics
    OPTM  Adam scalars (JSON line) followed by m/ and v/ tensors
    META  JSON: epoch, configs, loss history

Tensor blocks: u32 count, then per tensor u16 name length, utf-8 name,
u8 ndim, u64 dims, little-endian float64 data.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import format_flat, parse_flat
from ..numerics import ModelParameters
from .optim import AdamState

MAGIC = b"CKD1"


class CheckpointError(ValueError):
    """Truncated or corrupt checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Unrecognized magic/version tag."""


@dataclass
class Checkpoint:
    kind: str  # "student" or "teacher"
    spec: dict
    params: ModelParameters
    optimizer: AdamState | None = None
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _write_tensors(buf: io.BytesIO, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())


def _read_tensors(buf: io.BytesIO) -> dict[str, np.ndarray]:
    def take(n: int) -> bytes:
        b = buf.read(n)
        if len(b) != n:
            raise CheckpointError("tensor block truncated")
        return b

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_section(b"SPEC", format_flat({"kind": ckpt.kind, **ckpt.spec}).encode("utf-8")))
    for tag, tensors in ((b"PARM", ckpt.params.tensors), (b"BUFR", ckpt.params.buffers)):
        b = io.BytesIO()
        _write_tensors(b, tensors)
        out.write(_section(tag, b.getvalue()))
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        b = io.BytesIO()
        head = {"t": o.t, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "lr": o.lr}
        b.write(json.dumps(head).encode("utf-8") + b"\n")
        _write_tensors(b, {**{f"m/{k}": v for k, v in o.m.items()}, **{f"v/{k}": v for k, v in o.v.items()}})
        out.write(_section(b"OPTM", b.getvalue()))
    meta = {"epoch": ckpt.epoch, "history": ckpt.history, "meta": ckpt.meta}
    out.write(_section(b"META", json.dumps(meta).encode("utf-8")))
    body = out.getvalue()
    return body + _section(b"END!", struct.pack("<I", zlib.crc32(body)))


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 4:
        raise CheckpointError("checkpoint truncated before the header")
    if raw[:4] != MAGIC:
        raise CheckpointVersionError(f"unrecognized checkpoint header {raw[:4]!r} (expected {MAGIC!r})")
    pos = 4
    sections: dict[bytes, bytes] = {}
    while True:
        if pos + 12 > len(raw):
            raise CheckpointError("checkpoint truncated")
        tag = raw[pos:pos + 4]
        (length,) = struct.unpack("<Q", raw[pos + 4:pos + 12])
        payload = raw[pos + 12:pos + 12 + length]
        if len(payload) != length:
            raise CheckpointError(f"section {tag!r} truncated")
        if tag == b"END!":
            (crc,) = struct.unpack("<I", payload)
            if crc != zlib.crc32(raw[:pos]):
                raise CheckpointError("checkpoint CRC mismatch")
            break
        sections[tag] = payload
        pos += 12 + length
    for tag in (b"SPEC", b"PARM", b"BUFR", b"META"):
        if tag not in sections:
            raise CheckpointError(f"checkpoint lacks section {tag.decode()}")
    spec = parse_flat(sections[b"SPEC"].decode("utf-8"), "checkpoint spec")
    kind = spec.pop("kind")
    params = ModelParameters(_read_tensors(io.BytesIO(sections[b"PARM"])), _read_tensors(io.BytesIO(sections[b"BUFR"])))
    opt = None
    if b"OPTM" in sections:
        b = io.BytesIO(sections[b"OPTM"])
        head = json.loads(b.readline())
        t = _read_tensors(b)
        opt = AdamState({k[2:]: v for k, v in t.items() if k.startswith("m/")},
                        {k[2:]: v for k, v in t.items() if k.startswith("v/")}, **head)
    meta = json.loads(sections[b"META"])
    return Checkpoint(kind, spec, params, opt, meta["epoch"], meta["history"], meta["meta"])


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
