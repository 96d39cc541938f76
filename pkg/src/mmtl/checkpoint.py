"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"MMTL"
    version u32      currently 1
    digest  u32+utf8 config digest (informational; mismatch is a warning)
    iter    u64      outer-step counter
    seed    i64      base seed of the run
    count   u32      number of named tensors, then per tensor:
        name   u32 + utf8
        dtype  u8        0 = float64, 1 = float32
        rank   u32
        extent u64 x rank
        data   little-endian IEEE-754 values

Round trips are bit-exact; truncation, a bad magic or an unknown version
are load errors naming the defect.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MMTL"
VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4"}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    iteration: int
    seed: int
    config_digest: str
    version: int = VERSION


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], *,
                    iteration: int = 0, seed: int = 0,
                    config_digest: str = "") -> None:
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    digest = config_digest.encode("utf-8")
    parts.append(struct.pack("<I", len(digest)))
    parts.append(digest)
    parts.append(struct.pack("<Qq", iteration, seed))
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        code = _DTYPE_CODES[arr.dtype]
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path,
                    expected_digest: str | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(
            f"bad magic {magic!r}: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {VERSION})")
    (dlen,) = r.unpack("<I")
    digest = r.take(dlen).decode("utf-8")
    iteration, seed = r.unpack("<Qq")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        dt = np.dtype(_DTYPES[code])
        n = int(np.prod(shape)) if shape else 1
        raw = r.take(n * dt.itemsize)
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        tensors[name] = arr
    if r.pos != len(buf):
        raise CheckpointError(
            f"{len(buf) - r.pos} trailing bytes after tensor table")
    if expected_digest is not None and digest and digest != expected_digest:
        warnings.warn(
            f"checkpoint config digest {digest[:12]} does not match the "
            f"current config {expected_digest[:12]}; loading anyway")
    return Checkpoint(tensors=tensors, iteration=int(iteration),
                      seed=int(seed), config_digest=digest, version=version)
