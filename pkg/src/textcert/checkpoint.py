"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"TXTCERT\\0"
    version    u32
    arch       u32 length + UTF-8 name
    descriptor u32 length + UTF-8 architecture descriptor
    metadata   u32 length + UTF-8 JSON (training config, vocabulary, seed)
    count      u32 number of tensors
    tensor*    u16 name length, name, u8 dtype (0=f32, 1=f64), u8 ndim,
               u64 per dimension, raw row-major little-endian data
    end        4 bytes  b"END\\0"
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .models import build_from_descriptor
from .nn import Network

MAGIC = b"TXTCERT\0"
END = b"END\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def _blob(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def atomic_write(path, data, mode="wb"):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, net: Network, metadata: dict | None = None):
    parts = [MAGIC, struct.pack("<I", VERSION), _blob(net.arch), _blob(net.descriptor),
             _blob(json.dumps(metadata or {}, sort_keys=True))]
    tensors = net.named_params()
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        code = _CODES[arr.dtype]
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    parts.append(END)
    atomic_write(path, b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_checkpoint(path, expected_arch: str | None = None, lookup: np.ndarray | None = None):
    """Return ``(net, metadata)``.  Word models need their frozen ``lookup`` matrix."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    arch = r.string()
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"{path}: checkpoint is for architecture {arch!r}, not {expected_arch!r}")
    desc = r.string()
    meta = json.loads(r.string())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.take(len(END)) != END:
        raise CheckpointError(f"{path}: missing end marker")
    dtype = next(iter(tensors.values())).dtype if tensors else np.float32
    net = build_from_descriptor(desc, dtype=dtype, arch=arch,
                                lookup=None if lookup is None else lookup.astype(dtype))
    expected = set(net.named_params())
    if set(tensors) != expected:
        raise CheckpointError(f"{path}: tensors {sorted(tensors)} do not match architecture {sorted(expected)}")
    net.load_params(tensors)
    return net, meta
