"""Inverted-file index over unit embeddings, with optional product quantization.

Similarity is the inner product (= cosine for unit rows). Ranking is by
score descending, ties broken by the smaller record id, everywhere.

IVF-Flat stores full float32 rows and scores them exactly, so scanning all
lists reproduces :func:`brute_force_topk` hit for hit. IVF-PQ stores one
byte per sub-space and scores by asymmetric distance computation (ADC):
the query's sub-vectors are dotted against every codebook entry once, and a
candidate's score is the sum of ``M`` table lookups. ADC scores drift from
the exact value in both directions; the drift is what the downstream exact
re-scoring step exists to correct.

``AIVF`` file layout (little-endian)::

    magic b"AIVF" | version u16 | flags u16 (bit 0: PQ)
    dim u32 | nlist u32 | nprobe u32 | M u32 | bits u32 | ksub u32
    kmeans_max_iter u32 | seed i64 | count u64
    centroids     nlist*dim  f32
    codebooks     M*ksub*(dim/M) f32        (PQ only)
    list_offsets  (nlist+1)  u64
    list_ids      count      i64
    payload       count*M u8 (PQ) or count*dim f32 (flat)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import (
    BadMagic,
    DimensionMismatch,
    DimensionNotDivisible,
    EmptyIndex,
    TooFewPoints,
    TruncatedFile,
    VersionUnsupported,
)
from .kmeans import kmeans_train

INDEX_MAGIC = b"AIVF"
INDEX_VERSION = 1
_IDX_HEADER = struct.Struct("<4sHHIIIIIIIqQ")


@dataclass(frozen=True)
class IndexParams:
    nlist: int
    nprobe: int
    pq_enabled: bool = False
    M: int | None = None  # sub-quantizers; None -> dim // 8
    bits: int = 8
    seed: int = 0
    kmeans_max_iter: int = 25

    def __post_init__(self):
        if self.nlist < 1:
            raise ValueError("nlist must be >= 1")
        if not 1 <= self.nprobe <= self.nlist:
            raise ValueError(f"nprobe must be in [1, nlist={self.nlist}], got {self.nprobe}")
        if self.bits != 8:
            raise ValueError("only 8-bit PQ codes are supported")
        if self.M is not None and self.M < 1:
            raise ValueError("M must be positive")
        if self.kmeans_max_iter < 1:
            raise ValueError("kmeans_max_iter must be positive")

    @classmethod
    def default_for(cls, count: int, dim: int, nlist=None, nprobe=None, M=None, **kw) -> IndexParams:
        """Desk-scale defaults: nlist = ceil(sqrt(N)), nprobe = nlist // 8, M = D / 8."""
        nlist = nlist or max(1, math.ceil(math.sqrt(max(count, 1))))
        nprobe = nprobe or max(1, nlist // 8)
        return cls(nlist=nlist, nprobe=nprobe, M=M or max(1, dim // 8), **kw)

    def sub_quantizers(self, dim: int) -> int:
        return self.M if self.M is not None else max(1, dim // 8)


@dataclass(frozen=True)
class SearchHit:
    record_id: int
    fast_similarity: float
    rank: int


@dataclass(frozen=True, eq=False)
class IvfIndex:
    params: IndexParams
    dim: int
    centroids: np.ndarray  # (nlist, dim) f32
    list_offsets: np.ndarray  # (nlist + 1,) i64
    list_ids: np.ndarray  # (count,) i64, grouped by list, ascending id within a list
    vectors: np.ndarray | None = None  # (count, dim) f32, flat only
    codes: np.ndarray | None = None  # (count, M) u8, PQ only
    codebooks: np.ndarray | None = None  # (M, ksub, dim // M) f32, PQ only

    @property
    def count(self) -> int:
        return int(self.list_ids.shape[0])

    @property
    def nlist(self) -> int:
        return int(self.centroids.shape[0])

    def list_sizes(self) -> np.ndarray:
        return np.diff(self.list_offsets)

    def inverted_list(self, c: int) -> np.ndarray:
        return self.list_ids[self.list_offsets[c] : self.list_offsets[c + 1]]

    def with_nprobe(self, nprobe: int) -> IvfIndex:
        return replace(self, params=replace(self.params, nprobe=nprobe))

    def reconstruct(self, pos: np.ndarray) -> np.ndarray:
        """Stored representation of list positions ``pos`` as float32 rows."""
        if self.codes is None:
            return self.vectors[pos]
        m_sub = self.codebooks.shape[0]
        return np.concatenate([self.codebooks[m][self.codes[pos, m]] for m in range(m_sub)], axis=1)


# -- product quantization ----------------------------------------------------


def train_pq(X: np.ndarray, M: int, seeds, max_iter: int, ksub: int = 256) -> np.ndarray:
    n, d = X.shape
    if d % M:
        raise DimensionNotDivisible(f"dim {d} is not divisible by M={M}")
    ds = d // M
    ksub = min(ksub, n)
    books = np.empty((M, ksub, ds), dtype=np.float32)
    for m in range(M):
        sub = np.ascontiguousarray(X[:, m * ds : (m + 1) * ds])
        books[m] = kmeans_train(sub, ksub, seed=seeds[m], max_iter=max_iter, metric="l2").centroids
    return books


def pq_encode(X: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    M, _, ds = codebooks.shape
    codes = np.empty((X.shape[0], M), dtype=np.uint8)
    for m in range(M):
        sub = np.ascontiguousarray(X[:, m * ds : (m + 1) * ds])
        codes[:, m], _ = _kernels.assign_l2(sub, codebooks[m])
    return codes


# -- build / query -------------------------------------------------------------


def build_index(matrix, params: IndexParams, ids=None) -> IvfIndex:
    X = np.ascontiguousarray(getattr(matrix, "rows", matrix), dtype=np.float32)
    n, dim = X.shape
    if n < params.nlist:
        raise TooFewPoints(f"{n} vectors cannot fill nlist={params.nlist} lists")
    M = params.sub_quantizers(dim)
    if params.pq_enabled and dim % M:
        raise DimensionNotDivisible(f"dim {dim} is not divisible by M={M}")
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if ids.shape != (n,):
        raise DimensionMismatch("ids must have one entry per row")

    params = replace(params, M=M if params.pq_enabled else None)
    seeds = np.random.SeedSequence(int(params.seed) & 0xFFFF_FFFF_FFFF_FFFF).spawn(1 + M)
    coarse = kmeans_train(X, params.nlist, seed=seeds[0], max_iter=params.kmeans_max_iter, metric="ip")
    centroids = coarse.centroids
    labels, _ = _kernels.assign_ip(X, centroids)

    order = np.lexsort((ids, labels))
    counts = np.bincount(labels, minlength=params.nlist)
    offsets = np.zeros(params.nlist + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    list_ids = ids[order]

    if params.pq_enabled:
        books = train_pq(X, M, seeds[1:], params.kmeans_max_iter)
        codes = pq_encode(X, books)[order]
        return IvfIndex(params, dim, centroids, offsets, list_ids, codes=codes, codebooks=books)
    return IvfIndex(params, dim, centroids, offsets, list_ids, vectors=X[order].copy())


def _as_query(q, dim: int) -> np.ndarray:
    q = np.ascontiguousarray(np.asarray(q, dtype=np.float32).ravel())
    if q.shape[0] != dim:
        raise DimensionMismatch(f"query has dim {q.shape[0]}, index has {dim}")
    return q


def _topk(ids: np.ndarray, scores: np.ndarray, k: int):
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


def probe_lists(index: IvfIndex, q: np.ndarray, nprobe: int | None = None) -> np.ndarray:
    nprobe = index.params.nprobe if nprobe is None else nprobe
    cs = _kernels.ip_scores(index.centroids, q)
    return np.lexsort((np.arange(cs.shape[0]), -cs))[:nprobe]


def search_arrays(index: IvfIndex, q, k: int, nprobe: int | None = None):
    """Top-``k`` ``(ids, fast_scores)`` arrays for one query."""
    if index.count == 0:
        raise EmptyIndex("index holds no vectors")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _as_query(q, index.dim)
    probes = probe_lists(index, q, nprobe)
    pos = np.concatenate(
        [np.arange(index.list_offsets[c], index.list_offsets[c + 1]) for c in probes]
    ).astype(np.int64)
    ids = index.list_ids[pos]
    if index.codes is None:
        scores = _kernels.ip_scores(index.vectors[pos], q)
    else:
        table = _kernels.adc_table(q, index.codebooks)
        scores = _kernels.adc_scores(np.ascontiguousarray(index.codes[pos]), table)
    return _topk(ids, scores, k)


def _hits(ids, scores) -> list[SearchHit]:
    return [SearchHit(int(i), float(s), r) for r, (i, s) in enumerate(zip(ids, scores), start=1)]


def query(index: IvfIndex, q, k: int, nprobe: int | None = None) -> list[SearchHit]:
    return _hits(*search_arrays(index, q, k, nprobe))


def brute_force_arrays(matrix, q, k: int, ids=None):
    X = np.ascontiguousarray(getattr(matrix, "rows", matrix), dtype=np.float32)
    if X.shape[0] == 0:
        raise EmptyIndex("nothing to search")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _as_query(q, X.shape[1])
    ids = np.arange(X.shape[0], dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    return _topk(ids, _kernels.ip_scores(X, q), k)


def brute_force_topk(matrix, q, k: int, ids=None) -> list[SearchHit]:
    """Exact top-k by inner product against every row; the reference for :func:`query`."""
    return _hits(*brute_force_arrays(matrix, q, k, ids))


def recall_at_k(approx_ids, exact_ids, k: int) -> float:
    truth = set(int(i) for i in list(exact_ids)[:k])
    if not truth:
        return 0.0
    got = set(int(i) for i in list(approx_ids)[:k])
    return len(truth & got) / len(truth)


def mean_recall(index: IvfIndex, matrix, queries, k: int, nprobe: int | None = None) -> float:
    vals = []
    for q in getattr(queries, "rows", queries):
        a, _ = search_arrays(index, q, k, nprobe)
        e, _ = brute_force_arrays(matrix, q, k)
        vals.append(recall_at_k(a, e, k))
    return float(np.mean(vals)) if vals else 0.0


# -- serialization -------------------------------------------------------------


def save_index(index: IvfIndex, path) -> None:
    p = index.params
    pq = index.codes is not None
    M = index.codebooks.shape[0] if pq else 0
    ksub = index.codebooks.shape[1] if pq else 0
    header = _IDX_HEADER.pack(
        INDEX_MAGIC, INDEX_VERSION, 1 if pq else 0, index.dim, index.nlist, p.nprobe,
        M, p.bits, ksub, p.kmeans_max_iter, int(p.seed), index.count,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(index.centroids.astype("<f4").tobytes())
        if pq:
            fh.write(index.codebooks.astype("<f4").tobytes())
        fh.write(index.list_offsets.astype("<u8").tobytes())
        fh.write(index.list_ids.astype("<i8").tobytes())
        if pq:
            fh.write(np.ascontiguousarray(index.codes, dtype=np.uint8).tobytes())
        else:
            fh.write(index.vectors.astype("<f4").tobytes())


def load_index(path) -> IvfIndex:
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise BadMagic(f"{path}: not an AIVF index file")
    if len(data) < _IDX_HEADER.size:
        raise TruncatedFile(f"{path}: short header")
    (_, version, flags, dim, nlist, nprobe, M, bits, ksub, max_iter, seed, count) = _IDX_HEADER.unpack_from(data)
    if version != INDEX_VERSION:
        raise VersionUnsupported(f"{path}: AIVF version {version}")
    pq = bool(flags & 1)
    off = _IDX_HEADER.size

    def take(dtype, n):
        nonlocal off
        nbytes = np.dtype(dtype).itemsize * n
        if off + nbytes > len(data):
            raise TruncatedFile(f"{path}: truncated index payload")
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off)
        off += nbytes
        return arr

    centroids = take("<f4", nlist * dim).astype(np.float32).reshape(nlist, dim)
    books = take("<f4", M * ksub * (dim // M)).astype(np.float32).reshape(M, ksub, dim // M) if pq else None
    offsets = take("<u8", nlist + 1).astype(np.int64)
    list_ids = take("<i8", count).astype(np.int64)
    params = IndexParams(
        nlist=nlist, nprobe=nprobe, pq_enabled=pq, M=M if pq else None, bits=bits,
        seed=seed, kmeans_max_iter=max_iter,
    )
    if pq:
        codes = take("<u1", count * M).astype(np.uint8).reshape(count, M)
        return IvfIndex(params, dim, centroids, offsets, list_ids, codes=codes, codebooks=books)
    vectors = take("<f4", count * dim).astype(np.float32).reshape(count, dim)
    return IvfIndex(params, dim, centroids, offsets, list_ids, vectors=vectors)
