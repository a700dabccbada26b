"""Synthetic corpora with known ground truth.

Geometry (all directions orthonormal)::

    a_0 .. a_{A-1}   anchor directions
    t                 the reference text direction
    W_j               a few private dimensions per anchor
    B                 dimensions only background records use

Each anchor owns a neighbourhood living in span(a_j, t, W_j):

* planted records: similarity to a_j in [0.85, 0.92], strong text component
* distractors: similarity to a_j in [0.45, 0.64], text component anywhere

Background records have at most 0.35 similarity to any anchor. Because the
neighbourhoods are mutually orthogonal, an anchor's top-k never reaches into
another anchor's neighbourhood while the neighbourhood holds at least k
records.

Duplicate pairs copy a planted record's embedding. A duplicate-URL copy
shares the original's URL (half of them with an upper-cased scheme); a
duplicate-content copy points at a second file with identical bytes. Copies
always receive the larger record id, so the original is the one kept.
"""

from __future__ import annotations

import csv
import io
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .config import dump_config, RunConfig
from .embeddings import EmbeddingMatrix, save_embeddings

PLANTED = "planted"
DUP_URL_COPY = "dup_url_copy"
DUP_CONTENT_COPY = "dup_content_copy"
DISTRACTOR = "distractor"
BACKGROUND = "background"

PLANTED_SIM = (0.85, 0.92)
DISTRACTOR_SIM = (0.45, 0.64)
BACKGROUND_MAX_SIM = 0.35
REQUIRED_MARGIN = 0.2

_LANGS = ("en", "en", "en", "en", "de", "fr", "es", "pl", "it", "")


@dataclass
class _Spec:
    label: str
    anchor: int | None
    vec: np.ndarray
    fetch: str  # expected fetch outcome: ok / too_small / unreachable / not_an_image
    fmt: str = "png"
    size: tuple[int, int] = (0, 0)
    copy_of: int | None = None  # position in ``specs`` before shuffling


def _unit(v):
    return v / np.linalg.norm(v)


def _encode(fmt: str, size, color, tag: str) -> bytes:
    buf = io.BytesIO()
    if fmt == "png":
        # palette PNGs encode ~5x faster than RGB and only the header matters downstream
        img = Image.new("P", size, 0)
        img.putpalette(list(color))
        info = PngInfo()
        info.add_text("fixture-id", tag)
        img.save(buf, format="PNG", pnginfo=info, compress_level=1)
    else:
        img = Image.new("RGB", size, color)
        img.save(buf, format="JPEG", quality=70, comment=tag.encode())
    return buf.getvalue()


def _subspace_sizes(dim: int, n_anchors: int) -> tuple[int, int]:
    free = dim - n_anchors - 1
    per_anchor = min(4, free // (n_anchors + 1))
    if per_anchor < 1:
        raise ValueError(f"dim={dim} is too small for {n_anchors} anchors (need >= {2 * n_anchors + 2})")
    return per_anchor, free - n_anchors * per_anchor


def generate_fixture_corpus(
    out_dir,
    seed: int = 0,
    n: int = 5000,
    dim: int = 64,
    planted_fraction: float = 0.05,
    n_anchors: int = 10,
    neighbourhood: int = 150,
    dup_url_pairs: int = 10,
    dup_content_pairs: int = 10,
    min_dim: int = 256,
) -> dict:
    """Write a complete fixture into ``out_dir`` and return a summary.

    Files: ``embeddings.aemb`` (index-side rows, float16-rounded),
    ``exact.aemb``, ``anchors.aemb``, ``text_ref.aemb``, ``corpus.csv``,
    ``ground_truth.csv``, ``images/`` and a ready-to-use ``run.conf``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= planted_fraction <= 1.0:
        raise ValueError("planted_fraction must be within [0, 1]")
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    img_dir = out / "images"
    if img_dir.exists():
        shutil.rmtree(img_dir)
    img_dir.mkdir(parents=True)

    per_anchor, bg_dims = _subspace_sizes(dim, n_anchors)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    anchors = basis[:, :n_anchors].T
    text = basis[:, n_anchors]
    private = [
        basis[:, n_anchors + 1 + j * per_anchor : n_anchors + 1 + (j + 1) * per_anchor] for j in range(n_anchors)
    ]
    bg_basis = basis[:, dim - bg_dims :]
    span_at = basis[:, : n_anchors + 1]

    n_planted = int(round(n * planted_fraction))
    n_du = min(dup_url_pairs, n_planted // 2)
    n_dc = min(dup_content_pairs, n_planted - n_du)
    if n_planted + n_du + n_dc > n:
        raise ValueError("planted records and their duplicates do not fit into n")

    def neighbour(j, sim_rng, text_rng):
        ca = rng.uniform(*sim_rng)
        ct = rng.uniform(*text_rng)
        rest = max(0.0, 1.0 - ca * ca - ct * ct)
        w = _unit(private[j] @ rng.standard_normal(per_anchor))
        return _unit(ca * anchors[j] + ct * text + np.sqrt(rest) * w)

    specs: list[_Spec] = []
    for i in range(n_planted):
        j = i % n_anchors
        size = (int(rng.integers(min_dim, 1025)), int(rng.integers(min_dim, 1025)))
        if i < n_anchors:
            size = (min_dim, min_dim + i)  # exact boundary sizes are kept
        specs.append(_Spec(PLANTED, j, neighbour(j, PLANTED_SIM, (0.25, 0.35)), "ok",
                           "jpg" if rng.random() < 0.3 else "png", size))
    for p in range(n_du + n_dc):
        src = specs[p]
        label = DUP_URL_COPY if p < n_du else DUP_CONTENT_COPY
        specs.append(_Spec(label, src.anchor, src.vec.copy(), "ok", src.fmt, src.size, copy_of=p))

    per_anchor_count = np.zeros(n_anchors, dtype=int)
    for s in specs:
        per_anchor_count[s.anchor] += 1
    remaining = n - len(specs)
    slots = np.maximum(neighbourhood - per_anchor_count, 0)
    n_distractors = min(int(slots.sum()), remaining)
    placed = np.zeros(n_anchors, dtype=int)
    j = 0
    for _ in range(n_distractors):
        while placed[j] >= slots[j]:
            j = (j + 1) % n_anchors
        placed[j] += 1
        u = rng.random()
        if u < 0.15:
            fetch, size = "too_small", (int(rng.integers(64, min_dim)), int(rng.integers(min_dim, 900)))
            if rng.random() < 0.5:
                size = size[::-1]
        elif u < 0.2:
            fetch, size = "unreachable", (0, 0)
        elif u < 0.25:
            fetch, size = "not_an_image", (0, 0)
        else:
            fetch, size = "ok", (int(rng.integers(min_dim, 1025)), int(rng.integers(min_dim, 1025)))
        specs.append(_Spec(DISTRACTOR, j, neighbour(j, DISTRACTOR_SIM, (-0.15, 0.35)), fetch,
                           "jpg" if rng.random() < 0.3 else "png", size))
        j = (j + 1) % n_anchors

    for _ in range(n - len(specs)):
        c = rng.uniform(0.0, BACKGROUND_MAX_SIM)
        u = _unit(span_at @ rng.standard_normal(n_anchors + 1))
        w = _unit(bg_basis @ rng.standard_normal(bg_dims))
        fetch = "ok" if rng.random() < 0.8 else "too_small"
        lo = min_dim if fetch == "ok" else 64
        hi = 1025 if fetch == "ok" else min_dim
        specs.append(_Spec(BACKGROUND, None, _unit(c * u + np.sqrt(1 - c * c) * w), fetch,
                           "jpg" if rng.random() < 0.3 else "png",
                           (int(rng.integers(lo, hi)), int(rng.integers(min_dim if fetch == "ok" else 64, 1025)))))

    # shuffle, then make sure every copy has a larger record id than its original
    perm = rng.permutation(len(specs))  # perm[record_id] = spec index
    rid_of = np.empty(len(specs), dtype=int)
    rid_of[perm] = np.arange(len(specs))
    for si, s in enumerate(specs):
        if s.copy_of is not None and rid_of[si] < rid_of[s.copy_of]:
            a, b = rid_of[si], rid_of[s.copy_of]
            perm[a], perm[b] = perm[b], perm[a]
            rid_of[si], rid_of[s.copy_of] = b, a

    exact = np.stack([specs[perm[r]].vec for r in range(n)]).astype(np.float32)
    _check_margin(exact, anchors.astype(np.float32), [specs[perm[r]] for r in range(n)])

    rows, truth, payload_of = [], [], {}
    for r in range(n):
        s = specs[perm[r]]
        name = f"{r:05d}.{s.fmt}"
        path = img_dir / name
        if s.fetch == "unreachable":
            path = img_dir / f"missing_{r:05d}.{s.fmt}"
        elif s.fetch == "not_an_image":
            path.write_bytes(b"<html>not an image</html>" + rng.bytes(32))
        elif s.label == DUP_URL_COPY:
            path = None
        else:
            if s.label == DUP_CONTENT_COPY:
                data = payload_of[perm[r]] = payload_of[s.copy_of]
            else:
                color = tuple(int(x) for x in rng.integers(0, 256, 3))
                data = _encode(s.fmt, s.size, color, f"record-{r}")
                payload_of[perm[r]] = data
            path.write_bytes(data)
        if path is None:
            orig_r = int(rid_of[s.copy_of])
            url = rows[orig_r][1]
            if r % 2:
                url = "FILE" + url[4:]
        else:
            url = path.resolve().as_uri()
        lang = _LANGS[int(rng.integers(len(_LANGS)))]
        caption = {
            PLANTED: "satellite image of region {a}",
            DUP_URL_COPY: "satellite image of region {a} (mirror)",
            DUP_CONTENT_COPY: "satellite image of region {a} (repost)",
            DISTRACTOR: "aerial style picture {a}",
            BACKGROUND: "photo",
        }[s.label].format(a=s.anchor)
        rows.append((r, url, caption, lang))
        truth.append((r, s.label, "" if s.anchor is None else s.anchor, s.fetch))

    index_rows = exact.astype(np.float16).astype(np.float32)
    save_embeddings(EmbeddingMatrix(index_rows, normalized=False), out / "embeddings.aemb")
    save_embeddings(EmbeddingMatrix(exact, normalized=True), out / "exact.aemb")
    save_embeddings(EmbeddingMatrix(anchors.astype(np.float32), normalized=True), out / "anchors.aemb")
    save_embeddings(EmbeddingMatrix(text[None, :].astype(np.float32), normalized=True), out / "text_ref.aemb")

    with open(out / "corpus.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("record_id", "url", "caption", "language"))
        w.writerows(rows)
    with open(out / "ground_truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("record_id", "label", "anchor_id", "expected_fetch"))
        w.writerows(truth)

    cfg = RunConfig(
        index=Path("index.aivf"), embeddings=Path("embeddings.aemb"), corpus=Path("corpus.csv"),
        corpus_exact=Path("exact.aemb"), anchors=Path("anchors.aemb"), text_ref=Path("text_ref.aemb"),
        out_dir=Path("out"), preset="ver0", seed=seed,
    )
    (out / "run.conf").write_text(dump_config(cfg).replace("k = 100\n", ""), encoding="utf-8")

    labels = [t[1] for t in truth]
    return {
        "n": n,
        "anchors": n_anchors,
        "planted": labels.count(PLANTED),
        "dup_url_pairs": labels.count(DUP_URL_COPY),
        "dup_content_pairs": labels.count(DUP_CONTENT_COPY),
        "distractors": labels.count(DISTRACTOR),
        "background": labels.count(BACKGROUND),
    }


def _check_margin(exact, anchors, specs) -> None:
    """Planted rows must beat every non-planted row by REQUIRED_MARGIN on their own anchor."""
    sims = exact.astype(np.float64) @ anchors.T.astype(np.float64)
    in_domain = np.array([s.label in (PLANTED, DUP_URL_COPY, DUP_CONTENT_COPY) for s in specs])
    owner = np.array([-1 if s.anchor is None else s.anchor for s in specs])
    for j in range(anchors.shape[0]):
        mine = in_domain & (owner == j)
        if not mine.any() or in_domain.all():
            continue
        margin = sims[mine, j].min() - sims[~in_domain, j].max()
        if margin < REQUIRED_MARGIN:
            raise AssertionError(f"anchor {j}: planted margin {margin:.3f} < {REQUIRED_MARGIN}")


def read_ground_truth(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {
                "record_id": int(d["record_id"]),
                "label": d["label"],
                "anchor_id": int(d["anchor_id"]) if d["anchor_id"] else None,
                "expected_fetch": d["expected_fetch"],
            }
            for d in csv.DictReader(fh)
        ]
