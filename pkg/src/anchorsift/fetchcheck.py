"""Download candidates, read their pixel size from the header, fingerprint them.

Only the container header is parsed (PNG IHDR, JPEG SOF0/1/2); pixels are
never decoded. Anything else, WebP and GIF included, is ``UnknownFormat``.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import CorruptHeader, FetchError, HttpError, TooLarge, UnknownFormat, Unreachable

log = logging.getLogger(__name__)

MIN_DIM = 256
DEFAULT_TIMEOUT_S = 10.0
DEFAULT_RETRIES = 2
DEFAULT_MAX_BYTES = 64 * 1024 * 1024
DEFAULT_MAX_CONCURRENT = 16
MAX_REDIRECTS = 5

OK = "ok"
UNREACHABLE = "unreachable"
NOT_AN_IMAGE = "not_an_image"
TOO_SMALL = "too_small"

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_JPEG_SOF = {0xC0, 0xC1, 0xC2}
_JPEG_NO_LENGTH = {0x01, 0xD8} | set(range(0xD0, 0xD8))


@dataclass(frozen=True)
class FetchResult:
    record_id: int | None
    status: str
    width: int | None = None
    height: int | None = None
    content_digest: str | None = None  # sha256 hex of the raw bytes
    byte_count: int | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OK


# -- retrieval -----------------------------------------------------------------


class _LimitedRedirects(urllib.request.HTTPRedirectHandler):
    max_redirections = MAX_REDIRECTS


_opener = urllib.request.build_opener(_LimitedRedirects)


def _read_capped(stream, max_bytes: int) -> bytes:
    chunks, total = [], 0
    while True:
        chunk = stream.read(1 << 16)
        if not chunk:
            return b"".join(chunks)
        total += len(chunk)
        if total > max_bytes:
            raise TooLarge(f"body exceeds {max_bytes} bytes")
        chunks.append(chunk)


def _fetch_once(url: str, timeout: float, max_bytes: int) -> bytes:
    parts = urllib.parse.urlsplit(url)
    if parts.scheme == "file":
        path = urllib.request.url2pathname(urllib.parse.unquote(parts.path))
        try:
            with open(path, "rb") as fh:
                return _read_capped(fh, max_bytes)
        except OSError as exc:
            raise Unreachable(f"{url}: {exc.strerror or exc}") from exc
    try:
        with _opener.open(url, timeout=timeout) as resp:
            status = resp.status
            if status != 200:
                raise HttpError(status, url)
            length = resp.headers.get("Content-Length")
            if length and length.isdigit() and int(length) > max_bytes:
                raise TooLarge(f"{url}: Content-Length {length} exceeds {max_bytes}")
            return _read_capped(resp, max_bytes)
    except urllib.error.HTTPError as exc:
        raise HttpError(exc.code, url) from exc
    except (urllib.error.URLError, OSError, TimeoutError) as exc:
        reason = getattr(exc, "reason", exc)
        raise Unreachable(f"{url}: {reason}") from exc


def fetch(
    url: str,
    timeout: float = DEFAULT_TIMEOUT_S,
    retries: int = DEFAULT_RETRIES,
    max_bytes: int = DEFAULT_MAX_BYTES,
    backoff: float = 0.05,
) -> bytes:
    """Return the body of ``url`` (http, https or file).

    Connection failures, timeouts and 5xx answers are retried ``retries``
    more times; 4xx answers and oversized bodies fail immediately.
    """
    url = url.strip()
    scheme = urllib.parse.urlsplit(url).scheme.lower()
    if scheme not in ("http", "https", "file"):
        raise ValueError(f"unsupported URL scheme: {url!r}")
    last: FetchError | None = None
    for attempt in range(retries + 1):
        try:
            return _fetch_once(url, timeout, max_bytes)
        except HttpError as exc:
            if exc.status < 500:
                raise
            last = exc
        except Unreachable as exc:
            if scheme == "file":
                raise
            last = exc
        if attempt < retries and backoff:
            time.sleep(backoff * (attempt + 1))
    assert last is not None
    raise last


# -- header probing ------------------------------------------------------------


def _png_size(data: bytes) -> tuple[int, int]:
    if len(data) < 24:
        raise CorruptHeader("PNG shorter than its IHDR chunk")
    if data[12:16] != b"IHDR":
        raise CorruptHeader("PNG does not start with IHDR")
    w, h = struct.unpack(">II", data[16:24])
    if w == 0 or h == 0:
        raise CorruptHeader(f"PNG declares zero size {w}x{h}")
    return w, h


def _jpeg_size(data: bytes) -> tuple[int, int]:
    n = len(data)
    i = 2
    while True:
        if i >= n:
            raise CorruptHeader("JPEG ended before a frame header")
        if data[i] != 0xFF:
            raise CorruptHeader(f"expected JPEG marker at offset {i}")
        while i < n and data[i] == 0xFF:
            i += 1
        if i >= n:
            raise CorruptHeader("JPEG ended inside marker padding")
        marker = data[i]
        i += 1
        if marker in _JPEG_NO_LENGTH:
            continue
        if marker in (0xD9, 0xDA):
            raise CorruptHeader("JPEG reached scan data without a SOF0/1/2 frame header")
        if i + 2 > n:
            raise CorruptHeader("JPEG segment length cut off")
        seglen = (data[i] << 8) | data[i + 1]
        if seglen < 2:
            raise CorruptHeader(f"bad JPEG segment length {seglen}")
        if marker in _JPEG_SOF:
            if i + 7 > n or seglen < 7:
                raise CorruptHeader("JPEG frame header cut off")
            h, w = struct.unpack(">HH", data[i + 3 : i + 7])
            if w == 0 or h == 0:
                raise CorruptHeader(f"JPEG declares zero size {w}x{h}")
            return w, h
        i += seglen


def probe_dimensions(data: bytes) -> tuple[int, int]:
    """``(width, height)`` from a PNG or JPEG header."""
    if not data:
        raise UnknownFormat("empty payload")
    if data[:8] == PNG_SIGNATURE:
        return _png_size(data)
    if data[:2] == b"\xff\xd8":
        return _jpeg_size(data)
    raise UnknownFormat("neither a PNG nor a JPEG signature")


def content_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def validate_candidate(data: bytes, min_dim: int = MIN_DIM, record_id: int | None = None) -> FetchResult:
    """Classify fetched bytes; the size rule is inclusive (``>= min_dim``)."""
    try:
        w, h = probe_dimensions(data)
    except (UnknownFormat, CorruptHeader) as exc:
        return FetchResult(record_id, NOT_AN_IMAGE, byte_count=len(data), detail=str(exc))
    digest = content_digest(data)
    status = OK if (w >= min_dim and h >= min_dim) else TOO_SMALL
    return FetchResult(record_id, status, w, h, digest, len(data))


# -- bounded concurrent fetching -----------------------------------------------


class _Politeness:
    def __init__(self, delay: float):
        self.delay = delay
        self._lock = threading.Lock()
        self._next: dict[str, float] = {}

    def wait(self, url: str) -> None:
        if self.delay <= 0:
            return
        host = urllib.parse.urlsplit(url).netloc.lower()
        with self._lock:
            now = time.monotonic()
            slot = max(now, self._next.get(host, now))
            self._next[host] = slot + self.delay
        if slot > now:
            time.sleep(slot - now)


def fetch_and_validate(
    items,
    min_dim: int = MIN_DIM,
    timeout: float = DEFAULT_TIMEOUT_S,
    retries: int = DEFAULT_RETRIES,
    max_bytes: int = DEFAULT_MAX_BYTES,
    max_concurrent: int = DEFAULT_MAX_CONCURRENT,
    politeness_delay: float = 0.0,
) -> dict[int, FetchResult]:
    """Fetch ``(record_id, url)`` pairs concurrently; results keyed by record id.

    Callers must not depend on completion order; iterate the returned dict
    in sorted key order.
    """
    polite = _Politeness(politeness_delay)

    def work(item):
        rid, url = item
        polite.wait(url)
        try:
            body = fetch(url, timeout=timeout, retries=retries, max_bytes=max_bytes)
        except (FetchError, ValueError) as exc:
            log.debug("event=fetch_failed record_id=%s error=%s", rid, exc)
            return FetchResult(rid, UNREACHABLE, detail=str(exc))
        return validate_candidate(body, min_dim, rid)

    items = sorted(items)
    if not items:
        return {}
    workers = max(1, min(max_concurrent, len(items)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(work, items))
    return {r.record_id: r for r in sorted(results, key=lambda r: r.record_id)}
