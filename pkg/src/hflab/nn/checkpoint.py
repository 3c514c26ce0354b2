"""Binary checkpoint format.

Layout (little-endian)::

    magic        8 bytes  b"HFLBCKPT"
    version      u8       1
    spec_len     u32      then spec_len bytes of UTF-8 ``key = value`` lines
    digest       32 bytes SHA-256 of the spec text
    meta_len     u32      then meta_len bytes of UTF-8 ``key = value`` lines
    n_params     u32
    per parameter:
        name_len u16, name (UTF-8), ndim u8, dims u32 * ndim,
        data float32 * prod(dims)
    has_optim    u8       0 or 1
    if has_optim:
        step     u64
        per parameter, same order: m float32 * size, v float32 * size
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from hflab.errors import CheckpointError
from hflab.nn.optim import AdamWState

MAGIC = b"HFLBCKPT"
VERSION = 1


def dump_kv(d: Mapping[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad key-value line {line!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass
class Checkpoint:
    spec_text: str
    params: dict          # name -> np.ndarray (float32)
    meta: dict            # str -> str
    optim: AdamWState | None = None

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.spec_text.encode("utf-8")).digest()


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(path, spec_text: str, params: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None,
                    optim: AdamWState | None = None) -> None:
    buf = io.BytesIO()
    spec_b = spec_text.encode("utf-8")
    meta_b = dump_kv(meta or {}).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    buf.write(struct.pack("<I", len(spec_b)))
    buf.write(spec_b)
    buf.write(hashlib.sha256(spec_b).digest())
    buf.write(struct.pack("<I", len(meta_b)))
    buf.write(meta_b)
    names = list(params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(params[name])
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(_f32(arr))
    if optim is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", optim.step))
        for name in names:
            shape = np.shape(params[name])
            buf.write(_f32(optim.m.get(name, np.zeros(shape))))
            buf.write(_f32(optim.v.get(name, np.zeros(shape))))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not an hflab checkpoint")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (spec_len,) = r.unpack("<I")
    spec_b = r.take(spec_len)
    digest = r.take(32)
    if hashlib.sha256(spec_b).digest() != digest:
        raise CheckpointError(f"{path}: model-spec digest mismatch")
    (meta_len,) = r.unpack("<I")
    meta = parse_kv(r.take(meta_len).decode("utf-8"))
    (n_params,) = r.unpack("<I")
    params, shapes = {}, {}
    for _ in range(n_params):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        params[name] = r.floats(shape)
        shapes[name] = shape
    (has_optim,) = r.unpack("<B")
    optim = None
    if has_optim:
        (step,) = r.unpack("<Q")
        optim = AdamWState(step=int(step))
        for name in params:
            optim.m[name] = r.floats(shapes[name])
            optim.v[name] = r.floats(shapes[name])
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return Checkpoint(spec_b.decode("utf-8"), params, meta, optim)
