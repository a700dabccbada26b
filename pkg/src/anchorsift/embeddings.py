"""Embedding matrices, the binary ``AEMB`` format, and corpus metadata CSV.

Binary layout (all little-endian)::

    offset  size  field
    0       4     magic b"AEMB"
    4       2     format version (u16, currently 1)
    6       2     flags (u16; bit 0 = rows already unit-normalised)
    8       4     dim (u32)
    12      8     count (u64)
    20      4*count*dim   float32 values, row-major

Similarity math everywhere else in the package assumes unit rows, so that
cosine similarity is a plain inner product.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import (
    BadMagic,
    DimensionMismatch,
    NonFiniteValue,
    TruncatedFile,
    VersionUnsupported,
    ZeroVector,
)

MAGIC = b"AEMB"
FORMAT_VERSION = 1
FLAG_NORMALIZED = 0x1
DEFAULT_DIM = 512

_HEADER = struct.Struct("<4sHHIQ")
_LE_F32 = np.dtype("<f4")

CORPUS_COLUMNS = ("record_id", "url", "caption", "language")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """``count x dim`` float32 matrix; row ``i`` is record/anchor ``i``.

    The backing array is made read-only on construction.
    """

    rows: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.ascontiguousarray(self.rows, dtype=np.float32)
        if arr.ndim != 2:
            raise DimensionMismatch(f"embedding matrix must be 2-D, got shape {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise NonFiniteValue("embedding matrix contains NaN or Inf")
        if arr is self.rows:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "rows", arr)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    def __len__(self):
        return self.count

    def __getitem__(self, i):
        return self.rows[i]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.normalized == other.normalized
            and self.rows.shape == other.rows.shape
            and self.rows.tobytes() == other.rows.tobytes()
        )

    __hash__ = None

    @classmethod
    def empty(cls, dim: int = DEFAULT_DIM) -> EmbeddingMatrix:
        return cls(np.zeros((0, dim), dtype=np.float32), normalized=True)


def save_embeddings(matrix: EmbeddingMatrix, path) -> None:
    path = Path(path)
    flags = FLAG_NORMALIZED if matrix.normalized else 0
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, flags, matrix.dim, matrix.count)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(matrix.rows.astype(_LE_F32, copy=False).tobytes(order="C"))


def load_embeddings(path, normalize: bool = False) -> EmbeddingMatrix:
    """Read an ``AEMB`` file.

    With ``normalize=True`` rows are unit-normalised on load unless the
    header already marks them as normalised.
    """
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{path}: not an AEMB embedding file")
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: header is {len(data)} bytes, need {_HEADER.size}")
    _, version, flags, dim, count = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"{path}: AEMB version {version} (supported: {FORMAT_VERSION})")
    expected = _HEADER.size + 4 * dim * count
    if len(data) < expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes, found {len(data)}")
    rows = np.frombuffer(data, dtype=_LE_F32, count=dim * count, offset=_HEADER.size)
    rows = rows.astype(np.float32).reshape(count, dim)
    if rows.size and not np.isfinite(rows).all():
        bad = int(np.argwhere(~np.isfinite(rows))[0, 0])
        raise NonFiniteValue(f"{path}: row {bad} contains NaN or Inf")
    m = EmbeddingMatrix(rows, normalized=bool(flags & FLAG_NORMALIZED))
    if normalize and not m.normalized:
        m = normalize_rows(m)
    return m


def l2_normalize(v, eps: float = 1e-12) -> np.ndarray:
    v = np.asarray(v)
    out_dtype = v.dtype if np.issubdtype(v.dtype, np.floating) else np.float64
    v64 = v.astype(np.float64)
    if not np.isfinite(v64).all():
        raise NonFiniteValue("vector contains NaN or Inf")
    norm = math.sqrt(math.fsum(v64 * v64))
    if norm <= eps:
        raise ZeroVector(f"cannot normalise vector with norm {norm:g}")
    return (v64 / norm).astype(out_dtype)


def normalize_rows(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    rows = matrix.rows.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise ZeroVector(f"row {int(bad[0])} has zero norm")
    return EmbeddingMatrix((rows / norms[:, None]).astype(np.float32), normalized=True)


def cosine_sim(a, b) -> float:
    """Inner product of two unit vectors, clamped to [-1, 1].

    Accumulates float64 products in ascending feature order, the same order
    the index kernels use, so the result is exactly symmetric.
    """
    a = np.asarray(a, dtype=np.float32).ravel()
    b = np.asarray(b, dtype=np.float32).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    s = float(_kernels.ip_scores(a[None, :], b)[0])
    return min(1.0, max(-1.0, s))


# -- corpus metadata ---------------------------------------------------------


@dataclass(frozen=True)
class CorpusRecord:
    record_id: int
    url: str
    caption: str
    language: str | None = None

    @property
    def embedding_row(self) -> int:
        return self.record_id


def load_corpus(path, language_column: str = "language") -> list[CorpusRecord]:
    """Read the corpus CSV; records come back sorted by ``record_id``."""
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"record_id", "url", "caption"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rid = int(row["record_id"])
            if rid in seen:
                raise ValueError(f"{path}: duplicate record_id {rid}")
            seen.add(rid)
            lang = (row.get(language_column) or "").strip() or None
            records.append(CorpusRecord(rid, row["url"], row["caption"], lang))
    records.sort(key=lambda r: r.record_id)
    return records


def save_corpus(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CORPUS_COLUMNS)
        for r in sorted(records, key=lambda r: r.record_id):
            w.writerow([r.record_id, r.url, r.caption, r.language or ""])


def check_corpus(records, matrix: EmbeddingMatrix) -> None:
    for r in records:
        if not 0 <= r.embedding_row < matrix.count:
            raise DimensionMismatch(
                f"record {r.record_id} points at embedding row {r.embedding_row}, matrix has {matrix.count}"
            )
