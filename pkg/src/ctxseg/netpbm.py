"""Binary PPM (P6) and PGM (P5) with maxval 255."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    """Return (width, height, payload offset)."""
    if len(buf) < 2:
        raise NetpbmError("malformed header: file too short")
    got = buf[:2]
    if got != magic:
        if got[:1] == b"P" and got[1:2] in b"1234567":
            raise NetpbmError(f"unsupported format {got.decode()} (expected {magic.decode()})")
        raise NetpbmError("malformed header: bad magic number")
    fields: list[int] = []
    pos = 2
    n = len(buf)
    while len(fields) < 3:
        if pos >= n:
            raise NetpbmError("malformed header: truncated")
        ch = buf[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isdigit():
            start = pos
            while pos < n and buf[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise NetpbmError(f"malformed header: unexpected byte {ch!r}")
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise NetpbmError("malformed header: missing whitespace after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise NetpbmError("malformed header: non-positive extents")
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval} (only 255)")
    return width, height, pos + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, off = _parse_header(buf, magic)
    need = width * height * channels
    payload = buf[off:off + need]
    if len(payload) < need:
        raise NetpbmError(f"truncated payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return arr.reshape(shape).copy()


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    if arr.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 data, got {arr.dtype}")
    h, w = arr.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_image(path) -> np.ndarray:
    return _read(path, b"P6", 3)


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise NetpbmError(f"image must be (H, W, 3), got {image.shape}")
    _write(path, b"P6", image)


def read_mask(path) -> np.ndarray:
    return _read(path, b"P5", 1)


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise NetpbmError(f"mask must be (H, W), got {mask.shape}")
    _write(path, b"P5", mask)
