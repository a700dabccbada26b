"""Anchor-driven extraction: query, dedup, fetch, re-score, threshold, dedup.

Stage order and drop accounting::

    query_anchors          every (anchor, neighbour) pair          -> candidates_in
    dedup_by_url           one survivor per normalised URL         -> duplicate_url
    fetch + validate       retrievable, decodable, >= min_dim      -> unreachable / not_an_image / too_small
    rescore                exact image + text cosine
    compute_thresholds     mean - multiplier * std per distribution (global barrier)
    classify_quadrant      keep only kept_both                     -> below_tau_image / below_tau_text / below_both
    dedup_by_content       one survivor per byte digest            -> duplicate_content

``candidates_in == kept + sum(drops)`` holds globally and per anchor. Every
stage output is put in canonical order before the next stage runs, so
results do not depend on thread scheduling.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import urllib.parse
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .embeddings import cosine_sim, load_corpus, load_embeddings
from .errors import DimensionMismatch, MissingDigest, MissingExactEmbedding, TooFewSamples
from .fetchcheck import NOT_AN_IMAGE, OK, TOO_SMALL, UNREACHABLE, fetch_and_validate
from .index import IndexParams, IvfIndex, build_index, load_index, save_index, search_arrays

log = logging.getLogger(__name__)

DUPLICATE_URL = "duplicate_url"
BELOW_TAU_IMAGE = "below_tau_image"
BELOW_TAU_TEXT = "below_tau_text"
BELOW_BOTH = "below_both"
DUPLICATE_CONTENT = "duplicate_content"
DROP_STAGES = (
    DUPLICATE_URL, UNREACHABLE, NOT_AN_IMAGE, TOO_SMALL,
    BELOW_TAU_IMAGE, BELOW_TAU_TEXT, BELOW_BOTH, DUPLICATE_CONTENT,
)
FETCH_STAGES = (UNREACHABLE, NOT_AN_IMAGE, TOO_SMALL)

MANIFEST_COLUMNS = (
    "sample_id", "anchor_id", "record_id", "url", "caption", "fast_similarity",
    "image_similarity", "text_similarity", "width", "height", "language", "quadrant", "drop_stage",
)
EXTENDED_COLUMNS = ("rank", "content_digest")


class Quadrant(str, enum.Enum):
    KEPT_BOTH = "kept_both"
    VISUAL_ONLY = "visual_only"
    SEMANTIC_ONLY = "semantic_only"
    NEITHER = "neither"


_QUADRANT_DROP = {
    Quadrant.VISUAL_ONLY: BELOW_TAU_TEXT,
    Quadrant.SEMANTIC_ONLY: BELOW_TAU_IMAGE,
    Quadrant.NEITHER: BELOW_BOTH,
}


@dataclass(frozen=True)
class CandidateMatch:
    anchor_id: int
    record_id: int
    rank: int
    fast_similarity: float


@dataclass(frozen=True)
class ScoredCandidate:
    anchor_id: int
    record_id: int
    rank: int
    fast_similarity: float
    exact_image_similarity: float
    text_similarity: float
    width: int | None = None
    height: int | None = None
    content_digest: str | None = None
    caption: str = ""
    url: str = ""
    language: str | None = None


@dataclass(frozen=True)
class FilterThresholds:
    tau_image: float
    tau_text: float
    mean_image: float
    std_image: float
    mean_text: float
    std_text: float
    multiplier: float = 1.5
    n: int = 0
    fixed: bool = False  # True when tau values were supplied rather than derived


@dataclass
class ManifestRow:
    anchor_id: int
    record_id: int
    rank: int
    url: str
    caption: str
    fast_similarity: float
    image_similarity: float | None = None
    text_similarity: float | None = None
    width: int | None = None
    height: int | None = None
    language: str | None = None
    quadrant: str | None = None
    drop_stage: str | None = None
    sample_id: int | None = None
    content_digest: str | None = None

    @property
    def exact_image_similarity(self):
        return self.image_similarity

    def sort_key(self):
        return (self.anchor_id, self.rank, self.record_id)


# -- stages --------------------------------------------------------------------


def query_anchors(index: IvfIndex, anchors, k: int = 100, nprobe: int | None = None) -> list[CandidateMatch]:
    rows = getattr(anchors, "rows", anchors)
    out = []
    for a, q in enumerate(rows):
        ids, scores = search_arrays(index, q, k, nprobe)
        out.extend(
            CandidateMatch(a, int(i), r, float(s)) for r, (i, s) in enumerate(zip(ids, scores), start=1)
        )
    return out


def normalize_url(url: str) -> str:
    """Trim whitespace and lowercase scheme and host; path and query stay as-is."""
    parts = urllib.parse.urlsplit(url.strip())
    netloc = parts.netloc
    if "@" in netloc:
        userinfo, host = netloc.rsplit("@", 1)
        netloc = f"{userinfo}@{host.lower()}"
    else:
        netloc = netloc.lower()
    return urllib.parse.urlunsplit((parts.scheme.lower(), netloc, parts.path, parts.query, parts.fragment))


def _url_of(corpus, record_id):
    try:
        return corpus[record_id].url
    except (KeyError, IndexError) as exc:
        raise KeyError(f"record {record_id} missing from corpus metadata") from exc


def split_by_url(matches, corpus):
    """``(survivors, duplicates)``; survivors keep their input order."""
    best = {}
    for m in matches:
        key = normalize_url(_url_of(corpus, m.record_id))
        cur = best.get(key)
        rank_key = (-m.fast_similarity, m.anchor_id, m.record_id, m.rank)
        if cur is None or rank_key < cur[0]:
            best[key] = (rank_key, m)
    winners = {id(v[1]) for v in best.values()}
    keep = [m for m in matches if id(m) in winners]
    drop = [m for m in matches if id(m) not in winners]
    return keep, drop


def dedup_by_url(matches, corpus) -> list[CandidateMatch]:
    """Keep the highest-``fast_similarity`` occurrence of each URL.

    Ties go to the smaller anchor id, then the smaller record id.
    """
    return split_by_url(matches, corpus)[0]


def rescore(candidate, anchor_exact, record_exact, text_ref, record=None, fetched=None) -> ScoredCandidate:
    if record_exact is None:
        raise MissingExactEmbedding(f"no exact embedding for record {candidate.record_id}")
    return ScoredCandidate(
        candidate.anchor_id,
        candidate.record_id,
        candidate.rank,
        candidate.fast_similarity,
        cosine_sim(record_exact, anchor_exact),
        cosine_sim(record_exact, text_ref),
        width=getattr(fetched, "width", None),
        height=getattr(fetched, "height", None),
        content_digest=getattr(fetched, "content_digest", None),
        caption=getattr(record, "caption", ""),
        url=getattr(record, "url", ""),
        language=getattr(record, "language", None),
    )


def _mean_std(xs, ddof: int) -> tuple[float, float]:
    n = len(xs)
    mean = math.fsum(xs) / n
    var = math.fsum((x - mean) ** 2 for x in xs) / (n - ddof)
    return mean, math.sqrt(var)


def thresholds_from_scores(image, text, multiplier: float = 1.5, ddof: int = 0) -> FilterThresholds:
    image = [float(x) for x in image]
    text = [float(x) for x in text]
    if len(image) < 2 or len(text) != len(image):
        raise TooFewSamples(f"need at least 2 scored candidates, got {len(image)}")
    mi, si = _mean_std(image, ddof)
    mt, st = _mean_std(text, ddof)
    return FilterThresholds(mi - multiplier * si, mt - multiplier * st, mi, si, mt, st, multiplier, len(image))


def compute_thresholds(scored, multiplier: float = 1.5, ddof: int = 0) -> FilterThresholds:
    """Thresholds one ``multiplier`` of standard deviations below each mean.

    ``ddof=0`` (default) uses the population standard deviation.
    """
    scored = list(scored)
    return thresholds_from_scores(
        [s.exact_image_similarity for s in scored], [s.text_similarity for s in scored], multiplier, ddof
    )


def classify_quadrant(s, t: FilterThresholds) -> Quadrant:
    """Both comparisons are inclusive on the keep side."""
    img_ok = s.exact_image_similarity >= t.tau_image
    txt_ok = s.text_similarity >= t.tau_text
    if img_ok and txt_ok:
        return Quadrant.KEPT_BOTH
    if img_ok:
        return Quadrant.VISUAL_ONLY
    if txt_ok:
        return Quadrant.SEMANTIC_ONLY
    return Quadrant.NEITHER


def split_by_content(kept):
    best = {}
    for s in kept:
        if not s.content_digest:
            raise MissingDigest(f"record {s.record_id} has no content digest")
        key = (-s.exact_image_similarity, s.record_id, s.anchor_id, s.rank)
        cur = best.get(s.content_digest)
        if cur is None or key < cur[0]:
            best[s.content_digest] = (key, s)
    winners = {id(v[1]) for v in best.values()}
    return [s for s in kept if id(s) in winners], [s for s in kept if id(s) not in winners]


def dedup_by_content(kept) -> list[ScoredCandidate]:
    """One survivor per byte digest: highest image similarity, then smaller record id."""
    return split_by_content(kept)[0]


# -- orchestration -------------------------------------------------------------


@dataclass
class PipelineSettings:
    k: int = 100
    nprobe: int | None = None
    min_dim: int = 256
    multiplier: float = 1.5
    ddof: int = 0
    threshold_population: str = "validated"
    tau_image: float | None = None
    tau_text: float | None = None
    timeout: float = 10.0
    retries: int = 2
    max_bytes: int = 64 * 1024 * 1024
    max_concurrent_fetches: int = 16
    politeness_delay: float = 0.0
    jobs: int | None = None


@dataclass
class PipelineResult:
    rows: list[ManifestRow]  # every candidate, kept and dropped, canonical order
    thresholds: FilterThresholds | None
    anchors_total: int
    stats: dict = field(default_factory=dict)

    @property
    def manifest(self) -> list[ManifestRow]:
        return [r for r in self.rows if r.drop_stage is None]

    def drop_counts(self) -> dict[str, int]:
        c = Counter(r.drop_stage for r in self.rows if r.drop_stage)
        return {s: c.get(s, 0) for s in DROP_STAGES}


def candidate_rows(matches, corpus) -> list[ManifestRow]:
    """Attach corpus metadata to raw matches, in canonical order."""
    if not isinstance(corpus, dict):
        corpus = {r.record_id: r for r in corpus}
    rows = []
    for m in matches:
        rec = corpus.get(m.record_id)
        if rec is None:
            raise KeyError(f"record {m.record_id} missing from corpus metadata")
        rows.append(ManifestRow(m.anchor_id, m.record_id, m.rank, rec.url, rec.caption,
                                m.fast_similarity, language=rec.language))
    rows.sort(key=ManifestRow.sort_key)
    return rows


def stage_validate(rows, corpus_exact, anchors, text_ref, settings: PipelineSettings, fetcher=None) -> None:
    """URL dedup, fetch + size check, exact re-scoring. Updates ``rows`` in place."""
    s = settings
    anchor_rows = getattr(anchors, "rows", anchors)
    exact_rows = getattr(corpus_exact, "rows", corpus_exact)
    text_ref = np.asarray(getattr(text_ref, "rows", text_ref), dtype=np.float32).reshape(-1)

    for r in rows:
        r.drop_stage = r.quadrant = r.image_similarity = r.text_similarity = None
        r.width = r.height = r.content_digest = r.sample_id = None
    survivors, dup_url = split_by_url(rows, {r.record_id: r for r in rows})
    for r in dup_url:
        r.drop_stage = DUPLICATE_URL

    fetch_items = sorted({(r.record_id, r.url) for r in survivors})
    if fetcher is None:
        workers = min(s.max_concurrent_fetches, s.jobs or s.max_concurrent_fetches)
        fetched = fetch_and_validate(
            fetch_items, s.min_dim, s.timeout, s.retries, s.max_bytes, workers, s.politeness_delay
        )
    else:
        fetched = fetcher(fetch_items)
    log.info("event=fetch requested=%d ok=%d", len(fetch_items), sum(f.status == OK for f in fetched.values()))

    for r in survivors:
        if not 0 <= r.record_id < len(exact_rows):
            raise MissingExactEmbedding(f"no exact embedding for record {r.record_id}")
        f = fetched[r.record_id]
        sc = rescore(r, anchor_rows[r.anchor_id], exact_rows[r.record_id], text_ref, fetched=f)
        r.image_similarity, r.text_similarity = sc.exact_image_similarity, sc.text_similarity
        r.width, r.height, r.content_digest = f.width, f.height, f.content_digest
        if f.status != OK:
            r.drop_stage = f.status


def stage_filter(rows, settings: PipelineSettings) -> FilterThresholds | None:
    """Thresholds, quadrants, content dedup and sample ids. Updates ``rows`` in place.

    Re-running on rows that were already filtered starts again from the
    validated set, so the stage is idempotent.
    """
    s = settings
    for r in rows:
        if r.drop_stage in _QUADRANT_DROP.values() or r.drop_stage == DUPLICATE_CONTENT:
            r.drop_stage = None
        r.quadrant = None
        r.sample_id = None
    validated = [r for r in rows if r.drop_stage is None]
    if s.threshold_population == "validated":
        population = validated
    else:
        population = [r for r in rows if r.drop_stage != DUPLICATE_URL]

    thresholds = None
    if len(population) == 1:
        # a lone survivor has zero spread, so each tau is its own score
        p = population[0]
        thresholds = FilterThresholds(p.image_similarity, p.text_similarity, p.image_similarity, 0.0,
                                      p.text_similarity, 0.0, s.multiplier, 1)
        log.warning("event=thresholds_degenerate n=1 record_id=%d", p.record_id)
    elif population:
        thresholds = compute_thresholds(population, s.multiplier, s.ddof)
    if thresholds is not None:
        if s.tau_image is not None or s.tau_text is not None:
            thresholds = replace(
                thresholds,
                tau_image=thresholds.tau_image if s.tau_image is None else s.tau_image,
                tau_text=thresholds.tau_text if s.tau_text is None else s.tau_text,
                fixed=True,
            )
        log.info(
            "event=thresholds tau_image=%r tau_text=%r n=%d population=%s",
            thresholds.tau_image, thresholds.tau_text, thresholds.n, s.threshold_population,
        )

    kept_both = []
    for r in validated:
        q = classify_quadrant(r, thresholds)
        r.quadrant = q.value
        if q is Quadrant.KEPT_BOTH:
            kept_both.append(r)
        else:
            r.drop_stage = _QUADRANT_DROP[q]
    for r in split_by_content(kept_both)[1]:
        r.drop_stage = DUPLICATE_CONTENT

    rows.sort(key=ManifestRow.sort_key)
    sample = 0
    for r in rows:
        if r.drop_stage is None:
            r.sample_id = sample
            sample += 1
        else:
            log.debug("event=drop anchor_id=%d record_id=%d stage=%s", r.anchor_id, r.record_id, r.drop_stage)
    return thresholds


def extract(index, corpus, corpus_exact, anchors, text_ref, settings: PipelineSettings | None = None,
            fetcher=None) -> PipelineResult:
    """Run every stage in memory.

    ``corpus`` is a sequence of :class:`~anchorsift.embeddings.CorpusRecord`
    or a mapping from record id to one. ``fetcher`` stands in for the
    network stage: it takes ``[(record_id, url)]`` and returns
    ``{record_id: FetchResult}``.
    """
    s = settings or PipelineSettings()
    anchor_rows = getattr(anchors, "rows", anchors)
    anchors_total = len(anchor_rows)
    _kernels.set_threads(s.jobs)
    if index.count == 0 or anchors_total == 0:
        return PipelineResult([], None, anchors_total, summarize([], None, anchors_total))
    text_dim = np.asarray(getattr(text_ref, "rows", text_ref)).size
    if anchor_rows.shape[1] != index.dim or text_dim != index.dim:
        raise DimensionMismatch("anchors, text reference and index must share one dimension")

    matches = query_anchors(index, anchor_rows, s.k, s.nprobe)
    log.info("event=query anchors=%d candidates=%d", anchors_total, len(matches))
    rows = candidate_rows(matches, corpus)
    stage_validate(rows, corpus_exact, anchor_rows, text_ref, s, fetcher)
    thresholds = stage_filter(rows, s)
    return PipelineResult(rows, thresholds, anchors_total, summarize(rows, thresholds, anchors_total))


def summarize(rows, thresholds, anchors_total) -> dict:
    drops = Counter(r.drop_stage for r in rows if r.drop_stage)
    kept = [r for r in rows if r.drop_stage is None]
    st = {
        "anchors_total": anchors_total,
        "anchors_matched": len({r.anchor_id for r in rows}),
        "anchors_with_results": len({r.anchor_id for r in kept}),
        "candidates_in": len(rows),
        "kept": len(kept),
    }
    for stage in DROP_STAGES:
        st[f"dropped_{stage}"] = drops.get(stage, 0)
    if thresholds is not None:
        st.update(threshold_dict(thresholds))
    return st


def threshold_dict(t: FilterThresholds) -> dict:
    return {
        "tau_image": t.tau_image, "tau_text": t.tau_text, "mean_image": t.mean_image,
        "std_image": t.std_image, "mean_text": t.mean_text, "std_text": t.std_text,
        "multiplier": t.multiplier, "threshold_samples": t.n, "thresholds_fixed": t.fixed,
    }


# -- manifest I/O ----------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_manifest(rows, path, include_dropped: bool = False, extended: bool = False) -> None:
    """Write manifest CSV.

    ``extended`` appends ``rank`` and ``content_digest`` columns so the file
    can be fed back into a later stage.
    """
    header = MANIFEST_COLUMNS + (EXTENDED_COLUMNS if extended else ())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            if r.drop_stage is not None and not include_dropped:
                continue
            line = [
                _fmt(r.sample_id), r.anchor_id, r.record_id, r.url, r.caption, _fmt(r.fast_similarity),
                _fmt(r.image_similarity), _fmt(r.text_similarity), _fmt(r.width), _fmt(r.height),
                r.language or "", r.quadrant or "", r.drop_stage or "",
            ]
            if extended:
                line += [r.rank, r.content_digest or ""]
            w.writerow(line)


def _opt_float(s):
    return float(s) if s not in ("", None) else None


def _opt_int(s):
    return int(s) if s not in ("", None) else None


def read_manifest(path, language_column: str = "language") -> list[ManifestRow]:
    """Read a manifest (plain or extended). Plain files get rank 0 for every row."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for d in csv.DictReader(fh):
            out.append(ManifestRow(
                anchor_id=int(d["anchor_id"]), record_id=int(d["record_id"]), rank=int(d.get("rank") or 0),
                url=d["url"], caption=d["caption"], fast_similarity=float(d["fast_similarity"]),
                image_similarity=_opt_float(d.get("image_similarity")),
                text_similarity=_opt_float(d.get("text_similarity")),
                width=_opt_int(d.get("width")), height=_opt_int(d.get("height")),
                language=(d.get(language_column) or "").strip() or None,
                quadrant=d.get("quadrant") or None, drop_stage=d.get("drop_stage") or None,
                sample_id=_opt_int(d.get("sample_id")), content_digest=d.get("content_digest") or None,
            ))
    return out


def write_key_values(d: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in d.items():
            fh.write(f"{k}={_fmt(v)}\n")


def read_key_values(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# -- file-driven run -------------------------------------------------------------


def settings_from_config(cfg) -> PipelineSettings:
    return PipelineSettings(
        k=cfg.k, nprobe=cfg.nprobe, min_dim=cfg.min_dim, multiplier=cfg.multiplier,
        ddof=0 if cfg.std == "population" else 1, threshold_population=cfg.threshold_population,
        tau_image=cfg.tau_image, tau_text=cfg.tau_text, timeout=cfg.timeout_ms / 1000.0,
        retries=cfg.retries, max_bytes=cfg.max_bytes, max_concurrent_fetches=cfg.max_concurrent_fetches,
        politeness_delay=cfg.politeness_delay_ms / 1000.0, jobs=cfg.jobs,
    )


def index_params_from_config(cfg, count: int, dim: int) -> IndexParams:
    return IndexParams.default_for(
        count, dim, nlist=cfg.nlist, nprobe=cfg.nprobe, M=cfg.pq_m, pq_enabled=cfg.pq,
        seed=cfg.seed, kmeans_max_iter=cfg.kmeans_max_iter,
    )


def prepare_index(cfg) -> IvfIndex:
    """Load the index, or build and save it first when ``embeddings`` is configured."""
    if cfg.embeddings is not None:
        emb = load_embeddings(cfg.embeddings, normalize=True)
        if emb.count == 0:
            return IvfIndex(IndexParams(1, 1), emb.dim, np.zeros((0, emb.dim), np.float32),
                            np.zeros(1, np.int64), np.zeros(0, np.int64), vectors=emb.rows)
        params = index_params_from_config(cfg, emb.count, emb.dim)
        idx = build_index(emb, params)
        Path(cfg.index).parent.mkdir(parents=True, exist_ok=True)
        save_index(idx, cfg.index)
        log.info("event=index_built path=%s nlist=%d nprobe=%d pq=%s", cfg.index, params.nlist, params.nprobe, params.pq_enabled)
        return idx
    return load_index(cfg.index)


def run_pipeline(cfg) -> PipelineResult:
    """End-to-end run driven by a :class:`~anchorsift.config.RunConfig`.

    Writes ``manifest.csv``, ``candidates.csv`` (every candidate with its
    drop stage), ``thresholds.txt`` and ``run_stats.txt`` into ``out_dir``.
    """
    _kernels.set_threads(cfg.jobs)
    index = prepare_index(cfg)
    corpus = load_corpus(cfg.corpus, cfg.language_column)
    exact = load_embeddings(cfg.corpus_exact, normalize=True)
    anchors = load_embeddings(cfg.anchors, normalize=True)
    text = load_embeddings(cfg.text_ref, normalize=True)
    if text.count < 1:
        raise MissingExactEmbedding("text reference file holds no vector")
    result = extract(index, corpus, exact, anchors, text.rows[0], settings_from_config(cfg))
    ref = cfg.reference_thresholds
    if ref is not None:
        result.stats["preset"] = cfg.preset
        result.stats["reference_tau_image"], result.stats["reference_tau_text"] = ref

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(result.rows, out / "manifest.csv", include_dropped=cfg.keep_dropped)
    write_manifest(result.rows, out / "candidates.csv", include_dropped=True, extended=True)
    thr = result.thresholds
    write_key_values({} if thr is None else threshold_dict(thr), out / "thresholds.txt")
    write_key_values(result.stats, out / "run_stats.txt")
    return result
