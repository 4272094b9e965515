"""RXCK checkpoint files: a named-parameter archive of float32 arrays.

Layout, little-endian: magic "RXCK", u32 version=1, then entries until
EOF. Each entry: u32 name length, UTF-8 name, u32 rank, rank u32 dims,
row-major float32 payload. Writes are atomic (temp file + rename) and
round-trip bit-identically.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"RXCK"
VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated binary file."""


def atomic_write(path, payload: bytes):
    """Write bytes to `path` via a temp file + rename in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in entries.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def save_checkpoint(entries: dict[str, np.ndarray], path):
    atomic_write(path, checkpoint_bytes(entries))


def _take(buf: bytes, offset: int, n: int, what: str):
    if offset + n > len(buf):
        raise FormatError(f"truncated checkpoint: expected {n} more bytes for {what}, "
                          f"have {len(buf) - offset}")
    return buf[offset:offset + n], offset + n


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    raw, off = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise FormatError(f"bad magic {raw!r}, expected {MAGIC!r}")
    raw, off = _take(buf, off, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    entries: dict[str, np.ndarray] = {}
    while off < len(buf):
        raw, off = _take(buf, off, 4, "name length")
        name_len = struct.unpack("<I", raw)[0]
        raw, off = _take(buf, off, name_len, "name")
        name = raw.decode("utf-8")
        raw, off = _take(buf, off, 4, "rank")
        rank = struct.unpack("<I", raw)[0]
        raw, off = _take(buf, off, 4 * rank, "dims")
        dims = struct.unpack(f"<{rank}I", raw) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        raw, off = _take(buf, off, 4 * count, f"payload of {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}")
        entries[name] = arr
    return entries
