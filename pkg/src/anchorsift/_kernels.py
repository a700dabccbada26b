"""Hot numeric kernels, numba-compiled when available.

Every kernel exists twice: an ``@njit`` loop version and a vectorised numpy
version. Both accumulate in float64 over the feature axis in ascending
order, so the two paths return bit-identical results; float32 x float32
products are exact in float64, leaving summation order as the only source
of rounding.

Set ``ANCHORSIFT_DISABLE_NUMBA=1`` to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

_CHUNK = 4096

try:  # pragma: no cover - exercised implicitly by whichever path is active
    import numba
    from numba import njit, prange

    # the bundled TBB is too old for numba and only produces a warning
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_DISABLED = os.environ.get("ANCHORSIFT_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
USE_NUMBA = HAVE_NUMBA and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def np_ip_scores(X, q):
    n, d = X.shape
    out = np.empty(n, dtype=np.float64)
    q64 = q.astype(np.float64)
    for s in range(0, n, _CHUNK):
        blk = X[s : s + _CHUNK].astype(np.float64)
        acc = np.zeros(blk.shape[0], dtype=np.float64)
        for j in range(d):
            acc += blk[:, j] * q64[j]
        out[s : s + _CHUNK] = acc
    return out


def _np_ip_block(blk, C64):
    acc = np.zeros((blk.shape[0], C64.shape[0]), dtype=np.float64)
    for j in range(blk.shape[1]):
        acc += blk[:, j, None] * C64[None, :, j]
    return acc


def _np_l2_block(blk, C64):
    acc = np.zeros((blk.shape[0], C64.shape[0]), dtype=np.float64)
    for j in range(blk.shape[1]):
        diff = blk[:, j, None] - C64[None, :, j]
        acc += diff * diff
    return acc


def np_assign_ip(X, C):
    n = X.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    C64 = C.astype(np.float64)
    for s in range(0, n, _CHUNK):
        acc = _np_ip_block(X[s : s + _CHUNK].astype(np.float64), C64)
        lab = np.argmax(acc, axis=1)
        labels[s : s + _CHUNK] = lab
        best[s : s + _CHUNK] = acc[np.arange(acc.shape[0]), lab]
    return labels, best


def np_assign_l2(X, C):
    n = X.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    C64 = C.astype(np.float64)
    for s in range(0, n, _CHUNK):
        acc = _np_l2_block(X[s : s + _CHUNK].astype(np.float64), C64)
        lab = np.argmin(acc, axis=1)
        labels[s : s + _CHUNK] = lab
        best[s : s + _CHUNK] = acc[np.arange(acc.shape[0]), lab]
    return labels, best


def np_cluster_sums(X, labels, k):
    sums = np.zeros((k, X.shape[1]), dtype=np.float64)
    # add.at is unbuffered and walks rows in order: same accumulation order as the loop kernel
    np.add.at(sums, labels, X.astype(np.float64))
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return sums, counts


def np_adc_table(q, codebooks):
    m_sub, ksub, dsub = codebooks.shape
    table = np.zeros((m_sub, ksub), dtype=np.float64)
    q64 = q.astype(np.float64)
    for m in range(m_sub):
        cb = codebooks[m].astype(np.float64)
        acc = np.zeros(ksub, dtype=np.float64)
        for j in range(dsub):
            acc += q64[m * dsub + j] * cb[:, j]
        table[m] = acc
    return table


def np_adc_scores(codes, table):
    acc = np.zeros(codes.shape[0], dtype=np.float64)
    for m in range(codes.shape[1]):
        acc += table[m, codes[:, m]]
    return acc


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def nb_ip_scores(X, q):
        n, d = X.shape
        out = np.empty(n, dtype=np.float64)
        for i in prange(n):
            acc = 0.0
            for j in range(d):
                acc += np.float64(X[i, j]) * np.float64(q[j])
            out[i] = acc
        return out

    @njit(parallel=True, cache=True)
    def nb_assign_ip(X, C):
        n, d = X.shape
        k = C.shape[0]
        labels = np.empty(n, dtype=np.int64)
        best = np.empty(n, dtype=np.float64)
        for i in prange(n):
            bl = 0
            bv = -np.inf
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    acc += np.float64(X[i, j]) * np.float64(C[c, j])
                if acc > bv:
                    bv = acc
                    bl = c
            labels[i] = bl
            best[i] = bv
        return labels, best

    @njit(parallel=True, cache=True)
    def nb_assign_l2(X, C):
        n, d = X.shape
        k = C.shape[0]
        labels = np.empty(n, dtype=np.int64)
        best = np.empty(n, dtype=np.float64)
        for i in prange(n):
            bl = 0
            bv = np.inf
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    diff = np.float64(X[i, j]) - np.float64(C[c, j])
                    acc += diff * diff
                if acc < bv:
                    bv = acc
                    bl = c
            labels[i] = bl
            best[i] = bv
        return labels, best

    @njit(cache=True)
    def nb_cluster_sums(X, labels, k):
        n, d = X.shape
        sums = np.zeros((k, d), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        for i in range(n):
            c = labels[i]
            counts[c] += 1
            for j in range(d):
                sums[c, j] += np.float64(X[i, j])
        return sums, counts

    @njit(cache=True)
    def nb_adc_table(q, codebooks):
        m_sub, ksub, dsub = codebooks.shape
        table = np.empty((m_sub, ksub), dtype=np.float64)
        for m in range(m_sub):
            for c in range(ksub):
                acc = 0.0
                for j in range(dsub):
                    acc += np.float64(q[m * dsub + j]) * np.float64(codebooks[m, c, j])
                table[m, c] = acc
        return table

    @njit(parallel=True, cache=True)
    def nb_adc_scores(codes, table):
        n, m_sub = codes.shape
        out = np.empty(n, dtype=np.float64)
        for i in prange(n):
            acc = 0.0
            for m in range(m_sub):
                acc += table[m, codes[i, m]]
            out[i] = acc
        return out

else:  # pragma: no cover
    nb_ip_scores = nb_assign_ip = nb_assign_l2 = None
    nb_cluster_sums = nb_adc_table = nb_adc_scores = None


def _pick(nb_fn, np_fn):
    return nb_fn if USE_NUMBA else np_fn


ip_scores = _pick(nb_ip_scores, np_ip_scores)
assign_ip = _pick(nb_assign_ip, np_assign_ip)
assign_l2 = _pick(nb_assign_l2, np_assign_l2)
cluster_sums = _pick(nb_cluster_sums, np_cluster_sums)
adc_table = _pick(nb_adc_table, np_adc_table)
adc_scores = _pick(nb_adc_scores, np_adc_scores)


def set_threads(n: int | None) -> None:
    """Cap numba's worker pool; a no-op on the numpy path."""
    if not USE_NUMBA or n is None:
        return
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
