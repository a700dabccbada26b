import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anchorsift.embeddings import (
    CorpusRecord,
    EmbeddingMatrix,
    check_corpus,
    cosine_sim,
    l2_normalize,
    load_corpus,
    load_embeddings,
    normalize_rows,
    save_corpus,
    save_embeddings,
)
from anchorsift.errors import (
    BadMagic,
    DimensionMismatch,
    NonFiniteValue,
    TruncatedFile,
    VersionUnsupported,
    ZeroVector,
)

finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


def _header(dim, count, version=1, flags=0, magic=b"AEMB"):
    return struct.pack("<4sHHIQ", magic, version, flags, dim, count)


def test_load_hand_written_file(tmp_path):
    vals = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
    p = tmp_path / "m.aemb"
    p.write_bytes(_header(4, 2) + struct.pack("<8f", *vals))
    m = load_embeddings(p)
    assert (m.count, m.dim) == (2, 4)
    assert m.rows.tolist() == [vals[:4], vals[4:]]
    assert not m.normalized


def test_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    m = EmbeddingMatrix(rng.standard_normal((7, 5)).astype(np.float32))
    a, b = tmp_path / "a.aemb", tmp_path / "b.aemb"
    save_embeddings(m, a)
    save_embeddings(m, b)
    assert a.read_bytes() == b.read_bytes()
    assert load_embeddings(a) == m


def test_half_vector_round_trips_exactly(tmp_path):
    m = EmbeddingMatrix(np.array([[0.5, 0.5, 0.5, 0.5]], dtype=np.float32))
    save_embeddings(m, tmp_path / "h.aemb")
    assert load_embeddings(tmp_path / "h.aemb").rows.tolist() == [[0.5, 0.5, 0.5, 0.5]]


def test_empty_matrix_is_header_only(tmp_path):
    p = tmp_path / "e.aemb"
    save_embeddings(EmbeddingMatrix.empty(16), p)
    assert p.stat().st_size == 20
    m = load_embeddings(p)
    assert (m.count, m.dim) == (0, 16)


def test_truncated_mid_row(tmp_path):
    p = tmp_path / "t.aemb"
    p.write_bytes(_header(4, 2) + struct.pack("<6f", *range(6)))
    with pytest.raises(TruncatedFile):
        load_embeddings(p)


def test_short_header(tmp_path):
    p = tmp_path / "s.aemb"
    p.write_bytes(b"AEMB\x01\x00")
    with pytest.raises(TruncatedFile):
        load_embeddings(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.aemb"
    p.write_bytes(_header(1, 1, magic=b"NOPE") + struct.pack("<f", 1.0))
    with pytest.raises(BadMagic):
        load_embeddings(p)


def test_unknown_version(tmp_path):
    p = tmp_path / "v.aemb"
    p.write_bytes(_header(1, 1, version=2) + struct.pack("<f", 1.0))
    with pytest.raises(VersionUnsupported):
        load_embeddings(p)


def test_nan_is_rejected(tmp_path):
    p = tmp_path / "n.aemb"
    p.write_bytes(_header(2, 1) + struct.pack("<2f", 1.0, float("nan")))
    with pytest.raises(NonFiniteValue):
        load_embeddings(p)


def test_normalize_on_load_respects_flag(tmp_path):
    p = tmp_path / "u.aemb"
    save_embeddings(EmbeddingMatrix(np.array([[3.0, 4.0]], dtype=np.float32)), p)
    m = load_embeddings(p, normalize=True)
    assert m.normalized
    assert m.rows[0].tolist() == pytest.approx([0.6, 0.8], abs=1e-7)
    # already flagged: values are taken as-is
    save_embeddings(EmbeddingMatrix(np.array([[3.0, 4.0]], dtype=np.float32), normalized=True), p)
    assert load_embeddings(p, normalize=True).rows[0].tolist() == [3.0, 4.0]


def test_matrix_is_read_only():
    m = EmbeddingMatrix(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        m.rows[0, 0] = 5.0


def test_l2_normalize_examples():
    assert l2_normalize([3.0, 4.0]).tolist() == pytest.approx([0.6, 0.8])
    u = np.array([0.0, 1.0, 0.0])
    assert np.allclose(l2_normalize(u), u, atol=1e-7)
    with pytest.raises(ZeroVector):
        l2_normalize([0.0, 0.0])
    with pytest.raises(NonFiniteValue):
        l2_normalize([1.0, float("inf")])


def test_normalize_rows_zero_row():
    with pytest.raises(ZeroVector):
        normalize_rows(EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32)))


def test_cosine_examples():
    assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0
    v = l2_normalize(np.array([0.3, -0.2, 0.9], dtype=np.float32))
    assert cosine_sim(v, v) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(DimensionMismatch):
        cosine_sim([1.0, 0.0], [1.0, 0.0, 0.0])


def test_cosine_matches_extended_precision_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = l2_normalize(rng.standard_normal(512).astype(np.float32))
        b = l2_normalize(rng.standard_normal(512).astype(np.float32))
        ref = math.fsum(float(x) * float(y) for x, y in zip(a, b))
        assert abs(cosine_sim(a, b) - ref) <= 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 9)), elements=finite32))
def test_round_trip_property(tmp_path_factory, rows):
    p = tmp_path_factory.mktemp("rt") / "m.aemb"
    m = EmbeddingMatrix(rows)
    save_embeddings(m, p)
    assert load_embeddings(p) == m


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3)))
def test_normalize_norm_and_idempotence(v):
    if np.sqrt(np.sum(v * v)) <= 1e-6:
        return
    u = l2_normalize(v)
    assert abs(np.linalg.norm(u) - 1.0) <= 1e-4
    assert np.allclose(l2_normalize(u), u, atol=1e-7)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_cosine_symmetric_and_bounded(d, seed):
    rng = np.random.default_rng(seed)
    a = l2_normalize(rng.standard_normal(d).astype(np.float32))
    b = l2_normalize(rng.standard_normal(d).astype(np.float32))
    assert cosine_sim(a, b) == cosine_sim(b, a)
    assert -1.0 <= cosine_sim(a, b) <= 1.0
    assert cosine_sim(a, a) >= 1 - 1e-6


def test_corpus_csv_round_trip(tmp_path):
    recs = [CorpusRecord(2, "http://b", 'cap, with "quotes"', "de"), CorpusRecord(0, "http://a", "plain", None)]
    save_corpus(recs, tmp_path / "c.csv")
    back = load_corpus(tmp_path / "c.csv")
    assert [r.record_id for r in back] == [0, 2]
    assert back[1].caption == 'cap, with "quotes"'
    assert back[0].language is None and back[1].language == "de"
    assert back[1].embedding_row == 2


def test_corpus_custom_language_column(tmp_path):
    (tmp_path / "c.csv").write_text("record_id,url,caption,lang_guess\n0,u,c,fr\n")
    assert load_corpus(tmp_path / "c.csv", "lang_guess")[0].language == "fr"


def test_corpus_duplicate_ids(tmp_path):
    (tmp_path / "c.csv").write_text("record_id,url,caption,language\n1,a,x,\n1,b,y,\n")
    with pytest.raises(ValueError):
        load_corpus(tmp_path / "c.csv")


def test_check_corpus_row_bounds():
    m = EmbeddingMatrix(np.ones((2, 3), dtype=np.float32))
    check_corpus([CorpusRecord(0, "", ""), CorpusRecord(1, "", "")], m)
    with pytest.raises(DimensionMismatch):
        check_corpus([CorpusRecord(2, "", "")], m)
