"""Dataset statistics recomputed from a manifest.

Everything here is a pure function of the manifest rows (plus the number of
anchors, which a manifest cannot record for anchors that found nothing).
Rows with an empty ``drop_stage`` count as kept; rows with a quadrant count
as scored.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ZeroAnchors
from .pipeline import Quadrant

FIG6_MIN_TEXT_SIM = 0.22


def _kept(rows):
    return [r for r in rows if r.drop_stage is None]


def _scored(rows):
    return [r for r in rows if r.quadrant is not None]


def coverage_stats(rows, anchors_total: int) -> dict:
    """Share of anchors with at least one kept row, and mean rows per such anchor.

    The mean is taken over contributing anchors only; with no kept rows it
    is reported as 0 and ``mean_defined`` is False.
    """
    if anchors_total <= 0:
        raise ZeroAnchors("anchors_total must be positive")
    kept = _kept(rows)
    contributing = len({r.anchor_id for r in kept})
    return {
        "anchors_total": anchors_total,
        "anchors_with_results": contributing,
        "kept_rows": len(kept),
        "coverage_fraction": contributing / anchors_total,
        "mean_matches_per_contributing_anchor": len(kept) / contributing if contributing else 0.0,
        "mean_defined": contributing > 0,
    }


def format_coverage(cov: dict) -> str:
    return (
        f"coverage={100 * cov['coverage_fraction']:.2f}% "
        f"({cov['anchors_with_results']}/{cov['anchors_total']} anchors) "
        f"mean_matches_per_contributing_anchor={cov['mean_matches_per_contributing_anchor']:.1f}"
    )


def match_histogram(rows, anchors_total: int | None = None) -> dict[int, int]:
    """``{kept rows per anchor: number of anchors}``; anchors with none count at 0."""
    per_anchor = Counter(r.anchor_id for r in _kept(rows))
    if anchors_total is not None:
        for a in range(anchors_total):
            per_anchor.setdefault(a, 0)
    return dict(sorted(Counter(per_anchor.values()).items()))


def size_stats(rows) -> dict:
    kept = _kept(rows)
    if not kept:
        return {"count": 0, "mean_width": 0.0, "mean_height": 0.0, "max_width": 0, "max_height": 0}
    w = np.array([r.width for r in kept], dtype=np.float64)
    h = np.array([r.height for r in kept], dtype=np.float64)
    return {
        "count": len(kept),
        "mean_width": round(float(w.mean()), 1),
        "mean_height": round(float(h.mean()), 1),
        "max_width": int(w.max()),
        "max_height": int(h.max()),
    }


def language_distribution(rows) -> tuple[dict[str, float], int]:
    """Fractions over kept rows with a language tag, plus the untagged count."""
    kept = _kept(rows)
    tags = Counter(r.language for r in kept if r.language)
    unlabeled = sum(1 for r in kept if not r.language)
    total = sum(tags.values())
    dist = {t: c / total for t, c in sorted(tags.items())} if total else {}
    return dist, unlabeled


def quadrant_counts(rows) -> dict[str, int]:
    c = Counter(r.quadrant for r in _scored(rows))
    return {q.value: c.get(q.value, 0) for q in Quadrant}


@dataclass
class DivergenceReport:
    edges: np.ndarray  # shared bin edges for both axes
    counts: np.ndarray  # [fast_bin, exact_bin]
    n: int
    overestimated: int
    max_abs_diff: float

    @property
    def overestimation_rate(self) -> float:
        return self.overestimated / self.n if self.n else 0.0


def divergence_report(pairs, bins: int = 40, lo: float = -1.0, hi: float = 1.0) -> DivergenceReport:
    """2-D histogram of (fast, exact) similarity pairs.

    ``pairs`` is an iterable of ``(fast, exact)`` tuples or of scored rows.
    Values outside ``[lo, hi]`` fall in the edge bins so every pair is
    counted exactly once.
    """
    fast, exact = [], []
    for p in pairs:
        if isinstance(p, tuple):
            f, e = p
        else:
            f = p.fast_similarity
            e = getattr(p, "image_similarity", None)
            if e is None:
                e = p.exact_image_similarity
        fast.append(float(f))
        exact.append(float(e))
    fast = np.asarray(fast, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    edges = np.linspace(lo, hi, bins + 1)
    width = (hi - lo) / bins
    fi = np.clip(np.floor((fast - lo) / width).astype(np.int64), 0, bins - 1)
    ei = np.clip(np.floor((exact - lo) / width).astype(np.int64), 0, bins - 1)
    counts = np.zeros((bins, bins), dtype=np.int64)
    np.add.at(counts, (fi, ei), 1)
    diff = np.abs(fast - exact)
    return DivergenceReport(
        edges, counts, int(fast.size), int((fast > exact).sum()), float(diff.max()) if diff.size else 0.0
    )


@dataclass
class DatasetStats:
    coverage: dict
    match_histogram: dict[int, int]
    quadrant_counts: dict[str, int]
    sizes: dict
    language_distribution: dict[str, float]
    unlabeled: int
    divergence: DivergenceReport
    filters: dict = field(default_factory=dict)


def build_stats(rows, anchors_total: int, min_text_sim: float | None = None, bins: int = 40) -> DatasetStats:
    filters = {}
    if min_text_sim is not None:
        rows = [r for r in rows if r.text_similarity is not None and r.text_similarity > min_text_sim]
        filters["min_text_sim"] = min_text_sim
    dist, unlabeled = language_distribution(rows)
    return DatasetStats(
        coverage=coverage_stats(rows, anchors_total),
        match_histogram=match_histogram(rows, anchors_total),
        quadrant_counts=quadrant_counts(rows),
        sizes=size_stats(rows),
        language_distribution=dist,
        unlabeled=unlabeled,
        divergence=divergence_report(_scored(rows), bins=bins),
        filters=filters,
    )


def _csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_report(stats: DatasetStats, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cov, sz, dv = stats.coverage, stats.sizes, stats.divergence
    lines = [
        f"anchors_total={cov['anchors_total']}",
        f"anchors_with_results={cov['anchors_with_results']}",
        f"kept_rows={cov['kept_rows']}",
        f"coverage_percent={100 * cov['coverage_fraction']:.2f}",
        f"mean_matches_per_contributing_anchor={cov['mean_matches_per_contributing_anchor']:.1f}",
        f"mean_defined={str(cov['mean_defined']).lower()}",
        f"mean_width={sz['mean_width']:.1f}",
        f"mean_height={sz['mean_height']:.1f}",
        f"max_width={sz['max_width']}",
        f"max_height={sz['max_height']}",
        f"scored_rows={dv.n}",
        f"overestimation_rate={dv.overestimation_rate!r}",
        f"max_abs_fast_exact_diff={dv.max_abs_diff!r}",
        f"unlabeled_language={stats.unlabeled}",
    ]
    lines += [f"quadrant_{q}={c}" for q, c in stats.quadrant_counts.items()]
    lines += [f"filter_{k}={v}" for k, v in stats.filters.items()]
    (out / "stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    _csv(out / "fig2_histogram.csv", ("matches_per_anchor", "anchors"), stats.match_histogram.items())
    e = dv.edges
    _csv(
        out / "fig3_divergence.csv",
        ("fast_lo", "fast_hi", "exact_lo", "exact_hi", "count"),
        (
            (f"{e[i]:.4f}", f"{e[i + 1]:.4f}", f"{e[j]:.4f}", f"{e[j + 1]:.4f}", int(dv.counts[i, j]))
            for i in range(dv.counts.shape[0])
            for j in range(dv.counts.shape[1])
        ),
    )
    _csv(out / "quadrants.csv", ("quadrant", "count"), stats.quadrant_counts.items())
    _csv(
        out / "languages.csv",
        ("language", "fraction"),
        [(t, repr(f)) for t, f in stats.language_distribution.items()] + [("unlabeled_count", stats.unlabeled)],
    )
