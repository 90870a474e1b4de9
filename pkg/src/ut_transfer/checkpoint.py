"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic        8 bytes  b"UTSCKPT1"
    version      u32      1
    epoch        u32
    val_loss     f64
    desc_len     u32, then desc_len bytes of UTF-8 descriptor text
    n_tensors    u32
    per tensor:  name_len u16, name (UTF-8), dtype u8 (1 = float32, 2 = float64),
                 rank u8, rank x u32 dims, row-major payload
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .models import ArchitectureDescriptor, Model, ModelError

MAGIC = b"UTSCKPT1"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    """Unreadable or malformed checkpoint; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    model: Model
    epoch: int
    val_loss: float


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODE_FOR.get(arr.dtype)
        if code is None:
            raise TypeError(f"tensor {name}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise ValueError(f"tensor {name}: rank {arr.ndim} too large")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack("<" + "I" * arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def encode_checkpoint(model: Model, epoch: int, val_loss: float) -> bytes:
    desc = model.descriptor.to_text().encode("utf-8")
    head = MAGIC + struct.pack("<IId", VERSION, epoch, float(val_loss)) + struct.pack("<I", len(desc)) + desc
    return head + encode_tensors(model.state())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated file while reading {what}: need {n} bytes, "
                                  f"{len(self.raw) - self.pos} left", self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def decode_tensors(reader: _Reader) -> dict[str, np.ndarray]:
    count, = reader.unpack("I", "tensor count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        start = reader.pos
        nlen, = reader.unpack("H", f"name length of tensor {i}")
        try:
            name = reader.take(nlen, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor {i} name is not UTF-8", start + 2) from None
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}", start)
        code_pos = reader.pos
        code, rank = reader.unpack("BB", f"dtype/rank of {name}")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}", code_pos)
        dims_pos = reader.pos
        dims = reader.unpack("I" * rank, f"dims of {name}") if rank else ()
        dt = DTYPE_CODES[code]
        nbytes = math.prod(dims) * dt.itemsize  # exact: a wrapped int64 product could pass the length check
        payload = reader.take(nbytes, f"payload of {name} (dims {list(dims)})")
        try:
            out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        except ValueError as exc:  # e.g. a zero dim next to dims numpy cannot index
            raise CheckpointError(f"tensor {name}: unusable dims {list(dims)}: {exc}", dims_pos) from None
    return out


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    magic = r.take(8, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, = r.unpack("I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 8)
    epoch, val_loss = r.unpack("Id", "epoch/validation loss")
    desc_pos = r.pos
    dlen, = r.unpack("I", "descriptor length")
    try:
        desc = ArchitectureDescriptor.from_text(r.take(dlen, "descriptor").decode("utf-8"))
    except (UnicodeDecodeError, ModelError, TypeError, ValueError, OverflowError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"invalid descriptor: {exc}", desc_pos) from None
    tensors_pos = r.pos
    tensors = decode_tensors(r)
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} unexpected trailing bytes", r.pos)
    try:
        model = Model(desc, tensors)
    except (ModelError, FloatingPointError, TypeError) as exc:
        raise CheckpointError(f"tensors do not match descriptor: {exc}", tensors_pos) from None
    return Checkpoint(model, int(epoch), float(val_loss))


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename (text is UTF-8 encoded)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_checkpoint(path: str | os.PathLike, model: Model, epoch: int, val_loss: float) -> Path:
    atomic_write(path, encode_checkpoint(model, epoch, val_loss))
    return Path(path)


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}", 0) from None
    return decode_checkpoint(raw)
