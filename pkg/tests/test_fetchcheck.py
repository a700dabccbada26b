import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from anchorsift.errors import CorruptHeader, HttpError, TooLarge, UnknownFormat, Unreachable
from anchorsift.fetchcheck import (
    NOT_AN_IMAGE,
    OK,
    TOO_SMALL,
    UNREACHABLE,
    content_digest,
    fetch,
    fetch_and_validate,
    probe_dimensions,
    validate_candidate,
)
from anchorsift.stubserver import StubServer


def encode(w, h, fmt="PNG", **kw):
    buf = io.BytesIO()
    Image.new("RGB", (w, h), (40, 80, 120)).save(buf, format=fmt, **kw)
    return buf.getvalue()


@pytest.fixture(scope="module")
def srv():
    with StubServer() as s:
        yield s


# -- probing -------------------------------------------------------------------


@pytest.mark.parametrize("w,h,fmt", [(1, 1, "PNG"), (640, 480, "JPEG"), (300, 17, "PNG"), (33, 999, "JPEG")])
def test_probe_agrees_with_encoder(w, h, fmt):
    data = encode(w, h, fmt)
    assert probe_dimensions(data) == (w, h) == Image.open(io.BytesIO(data)).size


def test_progressive_jpeg():
    assert probe_dimensions(encode(320, 200, "JPEG", progressive=True)) == (320, 200)


def test_unknown_formats():
    for data in (b"", b"hello world, not an image", encode(10, 10, "GIF"), encode(10, 10, "WEBP")):
        with pytest.raises(UnknownFormat):
            probe_dimensions(data)


def test_truncated_headers():
    with pytest.raises(CorruptHeader):
        probe_dimensions(encode(5, 5)[:20])
    with pytest.raises(CorruptHeader):
        probe_dimensions(b"\xff\xd8\xff\xe0\x00")


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_probe_on_noise_fails_cleanly(data):
    try:
        w, h = probe_dimensions(data)
    except (UnknownFormat, CorruptHeader):
        return
    assert w > 0 and h > 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 400), st.sampled_from(["PNG", "JPEG"]))
def test_prefixes_of_real_files(cut, fmt):
    data = encode(257, 263, fmt)
    try:
        assert probe_dimensions(data[:cut]) == (257, 263)
    except (UnknownFormat, CorruptHeader):
        pass


# -- validation ----------------------------------------------------------------


def test_size_rule_is_inclusive():
    assert validate_candidate(encode(256, 256)).status == OK
    assert validate_candidate(encode(255, 1024)).status == TOO_SMALL
    assert validate_candidate(encode(1024, 255, "JPEG")).status == TOO_SMALL
    assert validate_candidate(encode(100, 100), min_dim=100).status == OK


def test_validate_fields():
    data = encode(300, 260, "JPEG")
    r = validate_candidate(data, record_id=7)
    assert (r.record_id, r.width, r.height, r.byte_count) == (7, 300, 260, len(data))
    assert r.content_digest == content_digest(data) and len(r.content_digest) == 64
    assert validate_candidate(data) == validate_candidate(data)
    bad = validate_candidate(b"garbage")
    assert bad.status == NOT_AN_IMAGE and bad.content_digest is None


def test_digest_equality_tracks_byte_equality():
    blobs = [encode(w, h, f) for w in (256, 300) for h in (256, 301) for f in ("PNG", "JPEG")]
    for a in blobs:
        for b in blobs:
            assert (content_digest(a) == content_digest(b)) == (a == b)


# -- retrieval -----------------------------------------------------------------


def test_file_url_returns_exact_bytes(tmp_path):
    data = encode(3, 2)
    p = tmp_path / "a b.png"
    p.write_bytes(data)
    assert fetch(p.as_uri()) == data
    with pytest.raises(Unreachable):
        fetch((tmp_path / "missing.png").as_uri())


def test_unsupported_scheme():
    with pytest.raises(ValueError):
        fetch("ftp://example.invalid/x.png")


def test_http_ok_and_404(srv):
    data = encode(2, 2)
    srv.route("/ok.png", body=data)
    assert fetch(srv.url("/ok.png")) == data
    srv.hits.clear()
    with pytest.raises(HttpError) as info:
        fetch(srv.url("/nothing-here"), retries=3)
    assert info.value.status == 404
    assert srv.hits["/nothing-here"] == 1  # client errors are not retried


def test_timeout_is_retried_then_unreachable(srv):
    srv.route("/slow", body=b"x", delay=0.6)
    srv.hits.clear()
    with pytest.raises(Unreachable):
        fetch(srv.url("/slow"), timeout=0.15, retries=2, backoff=0)
    assert srv.hits["/slow"] == 3


def test_transient_5xx_recovers(srv):
    srv.route("/flaky", body=b"fine", fail_first=2)
    srv.hits.clear()
    assert fetch(srv.url("/flaky"), retries=2, backoff=0) == b"fine"
    srv.route("/flaky2", body=b"fine", fail_first=3)
    with pytest.raises(HttpError):
        fetch(srv.url("/flaky2"), retries=2, backoff=0)


def test_redirect_limit(srv):
    srv.route("/target", body=b"end")
    for i in range(1, 8):
        nxt = "/target" if i == 1 else f"/hop{i - 1}"
        srv.route(f"/hop{i}", status=302, headers={"Location": nxt})
    assert fetch(srv.url("/hop5")) == b"end"
    with pytest.raises(HttpError):
        fetch(srv.url("/hop7"), retries=0)


def test_too_large(srv, tmp_path):
    srv.route("/big", body=b"\0" * 5000)
    with pytest.raises(TooLarge):
        fetch(srv.url("/big"), max_bytes=4999)
    assert len(fetch(srv.url("/big"), max_bytes=5000)) == 5000
    p = tmp_path / "big.bin"
    p.write_bytes(b"\0" * 100)
    with pytest.raises(TooLarge):
        fetch(p.as_uri(), max_bytes=99)


def test_fetch_and_validate(srv):
    big, small = encode(256, 256), encode(40, 40)
    srv.route("/v/big.png", body=big)
    srv.route("/v/copy.png", body=big)
    srv.route("/v/small.png", body=small)
    srv.route("/v/text", body=b"<html>")
    items = [(4, srv.url("/v/text")), (1, srv.url("/v/big.png")), (3, srv.url("/v/gone")),
             (2, srv.url("/v/small.png")), (0, srv.url("/v/copy.png"))]
    out = fetch_and_validate(items, retries=0, max_concurrent=3)
    assert list(out) == [0, 1, 2, 3, 4]
    assert [out[i].status for i in range(5)] == [OK, OK, TOO_SMALL, UNREACHABLE, NOT_AN_IMAGE]
    assert out[0].content_digest == out[1].content_digest
    assert fetch_and_validate([]) == {}
    again = fetch_and_validate(list(reversed(items)), retries=0, max_concurrent=1)
    assert again == out
