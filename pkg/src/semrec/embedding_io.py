"""RXEB embedding files and the pooling strategies that build the offline
item-embedding cache.

RXEB layout, little-endian: magic "RXEB", u32 version=1, u8 kind
(0=item-level, 1=token-level), u8 dtype (0=f32), u8 flags (bit0 = the
embeddings came from a one-word-limit prompt), u8 reserved=0, u32 count N,
u32 dim H. Item-level payload: N*H f32 row-major in catalog order.
Token-level payload: N u32 token counts, then each item's T_i x H f32
matrix row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import FormatError, atomic_write
from .hashing import digest_bytes

MAGIC = b"RXEB"
VERSION = 1
KIND_ITEM = 0
KIND_TOKEN = 1
DTYPE_F32 = 0
FLAG_EOL = 0x01

_HEADER = struct.Struct("<4sIBBBBII")

POOLING_STRATEGIES = ("mean", "max", "last", "eol")


@dataclass
class TokenEmbeddingStore:
    """Per-item matrices of final-layer token states, aligned to catalog order.

    `eol` records that the producing prompts constrained the item to a single
    word, which is what licenses last-token pooling as "eol".
    """

    dim: int
    matrices: list = field(default_factory=list)
    eol: bool = False
    source_digest: str | None = None

    def __len__(self):
        return len(self.matrices)

    def validate(self):
        if self.dim <= 0:
            raise ValueError(f"dim must be positive, got {self.dim}")
        for i, m in enumerate(self.matrices):
            if m.ndim != 2 or m.shape[1] != self.dim:
                raise ValueError(f"item row {i}: matrix shape {m.shape} does not match dim {self.dim}")
            if m.shape[0] < 1:
                raise ValueError(f"item row {i}: empty token matrix")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"item row {i}: non-finite entries")


@dataclass
class ItemEmbeddingTable:
    """N x dim table of pooled item vectors in catalog order, plus provenance."""

    rows: np.ndarray
    strategy: str | None = None
    source_digest: str | None = None
    eol: bool = False

    @property
    def dim(self):
        return self.rows.shape[1]

    def __len__(self):
        return self.rows.shape[0]

    def validate(self):
        if self.rows.ndim != 2:
            raise ValueError(f"rows must be rank 2, got shape {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("table contains non-finite entries")


# ---------------------------------------------------------------------------
# pooling


def pool_mean(matrix: np.ndarray) -> np.ndarray:
    """Column-wise mean; accumulates in float64 and rounds back to float32."""
    _check_matrix(matrix)
    return np.mean(matrix, axis=0, dtype=np.float64).astype(np.float32)


def pool_max(matrix: np.ndarray) -> np.ndarray:
    """Column-wise maximum."""
    _check_matrix(matrix)
    return np.max(matrix, axis=0).astype(np.float32)


def pool_last(matrix: np.ndarray) -> np.ndarray:
    """The final token's hidden state."""
    _check_matrix(matrix)
    return matrix[-1].astype(np.float32).copy()


def pool_eol(matrix: np.ndarray, from_eol_prompt: bool) -> np.ndarray:
    """The one-word slot token's state: numerically the last row, but only
    valid when the prompt constrained the item to a single word."""
    if not from_eol_prompt:
        raise ValueError("EOL pooling requires EOL-prompt embeddings "
                         "(provenance flag not set on the token file)")
    return pool_last(matrix)


def _check_matrix(matrix):
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ValueError(f"expected a T x H matrix with T >= 1, got shape {matrix.shape}")


def build_item_table(store: TokenEmbeddingStore, strategy: str) -> ItemEmbeddingTable:
    """Pool every item's token matrix into one row, in catalog order.

    Args:
        store: token-level embeddings, one matrix per catalog item.
        strategy: one of "mean", "max", "last", "eol".

    Raises:
        ValueError: unknown strategy, EOL without provenance, or a
            non-finite pooled row (named by its catalog position).
    """
    if strategy not in POOLING_STRATEGIES:
        raise ValueError(f"unknown pooling strategy {strategy!r}; "
                         f"expected one of {POOLING_STRATEGIES}")
    if strategy == "eol" and not store.eol:
        raise ValueError("EOL pooling requires EOL-prompt embeddings "
                         "(provenance flag not set on the token file)")
    rows = np.empty((len(store), store.dim), dtype=np.float32)
    for i, m in enumerate(store.matrices):
        if strategy == "mean":
            row = pool_mean(m)
        elif strategy == "max":
            row = pool_max(m)
        elif strategy == "last":
            row = pool_last(m)
        else:
            row = pool_eol(m, store.eol)
        if not np.all(np.isfinite(row)):
            raise ValueError(f"pooled row for item at catalog position {i} is non-finite")
        rows[i] = row
    return ItemEmbeddingTable(rows=rows, strategy=strategy,
                              source_digest=store.source_digest, eol=store.eol)


# ---------------------------------------------------------------------------
# RXEB read / write


def _pack_header(kind: int, flags: int, count: int, dim: int) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, kind, DTYPE_F32, flags, 0, count, dim)


def _unpack_header(buf: bytes):
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}")
    magic, version, kind, dtype, flags, _reserved, count, dim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if kind not in (KIND_ITEM, KIND_TOKEN):
        raise FormatError(f"unknown kind {kind}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype} (only f32 in v1)")
    return kind, flags, count, dim


def write_item_embeddings(table: ItemEmbeddingTable, path):
    table.validate()
    rows = np.ascontiguousarray(table.rows, dtype="<f4")
    flags = FLAG_EOL if table.eol else 0
    payload = _pack_header(KIND_ITEM, flags, rows.shape[0], rows.shape[1]) + rows.tobytes()
    atomic_write(path, payload)


def read_item_embeddings(path) -> ItemEmbeddingTable:
    with open(path, "rb") as f:
        buf = f.read()
    kind, flags, count, dim = _unpack_header(buf)
    if kind != KIND_ITEM:
        raise FormatError("expected an item-level file, got token-level")
    expected = _HEADER.size + 4 * count * dim
    if len(buf) != expected:
        raise FormatError(f"truncated payload: expected {expected} bytes total, got {len(buf)}")
    rows = np.frombuffer(buf, dtype="<f4", count=count * dim,
                         offset=_HEADER.size).reshape(count, dim).astype(np.float32)
    table = ItemEmbeddingTable(rows=rows, eol=bool(flags & FLAG_EOL),
                               source_digest=digest_bytes(buf))
    table.validate()
    return table


def write_token_embeddings(store: TokenEmbeddingStore, path):
    store.validate()
    counts = np.array([m.shape[0] for m in store.matrices], dtype="<u4")
    flags = FLAG_EOL if store.eol else 0
    parts = [_pack_header(KIND_TOKEN, flags, len(store), store.dim), counts.tobytes()]
    for m in store.matrices:
        parts.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
    atomic_write(path, b"".join(parts))


def read_token_embeddings(path) -> TokenEmbeddingStore:
    with open(path, "rb") as f:
        buf = f.read()
    kind, flags, count, dim = _unpack_header(buf)
    if kind != KIND_TOKEN:
        raise FormatError("expected a token-level file, got item-level")
    off = _HEADER.size
    if len(buf) < off + 4 * count:
        raise FormatError(f"truncated payload: expected {off + 4 * count} bytes for "
                          f"token counts, got {len(buf)}")
    counts = np.frombuffer(buf, dtype="<u4", count=count, offset=off)
    off += 4 * count
    expected = off + 4 * dim * int(counts.sum())
    if len(buf) != expected:
        raise FormatError(f"truncated payload: expected {expected} bytes total, got {len(buf)}")
    matrices = []
    for t in counts:
        t = int(t)
        m = np.frombuffer(buf, dtype="<f4", count=t * dim, offset=off)
        matrices.append(m.reshape(t, dim).astype(np.float32))
        off += 4 * t * dim
    store = TokenEmbeddingStore(dim=dim, matrices=matrices,
                                eol=bool(flags & FLAG_EOL), source_digest=digest_bytes(buf))
    store.validate()
    return store
