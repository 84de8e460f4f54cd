"""``CSEG`` checkpoint files.

Layout, little-endian::

    b"CSEG" | u32 version | u32 json_len | json (utf-8)
    u32 tensor_count | tensor records | u32 crc32 of everything before it

A tensor record is ``u16 name_len | name | u8 dtype | u8 rank | u32 extents[rank]
| row-major payload``; dtype code 0 is float32, 1 is float64.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CSEG"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    labels: list[str]
    similarity_pairs: list[list[str]]
    embeddings: np.ndarray
    params: dict[str, np.ndarray]
    adam_t: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    epoch: int = 0


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, order="C")  # ascontiguousarray would turn 0-d into 1-d
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(dt, copy=False).tobytes()


def to_bytes(ck: Checkpoint) -> bytes:
    meta = {
        "config": ck.config,
        "labels": ck.labels,
        "similarity_pairs": ck.similarity_pairs,
        "adam_t": ck.adam_t,
        "rng_state": ck.rng_state,
        "epoch": ck.epoch,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = [("embeddings", ck.embeddings)]
    tensors += [(f"param/{k}", v) for k, v in sorted(ck.params.items())]
    tensors += [(f"adam_m/{k}", v) for k, v in sorted(ck.adam_m.items())]
    tensors += [(f"adam_v/{k}", v) for k, v in sorted(ck.adam_v.items())]
    body = MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + struct.pack("<I", len(tensors))
    body += b"".join(_tensor_record(n, a) for n, a in tensors)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 16:
        raise CheckpointError("truncated checkpoint")
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a CSEG checkpoint")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    r = _Reader(body)
    r.take(8)
    (jlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(jlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("malformed config block") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    pick = lambda prefix: {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}  # noqa: E731
    if "embeddings" not in tensors:
        raise CheckpointError("checkpoint lacks embeddings")
    return Checkpoint(
        config=meta["config"], labels=meta["labels"], similarity_pairs=meta["similarity_pairs"],
        embeddings=tensors["embeddings"], params=pick("param/"), adam_t=meta["adam_t"],
        adam_m=pick("adam_m/"), adam_v=pick("adam_v/"), rng_state=meta["rng_state"], epoch=meta["epoch"],
    )


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return from_bytes(buf)
