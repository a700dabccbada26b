import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from anchorsift.errors import ZeroAnchors
from anchorsift.pipeline import ManifestRow, read_key_values, read_manifest
from anchorsift.report import (
    build_stats,
    coverage_stats,
    divergence_report,
    format_coverage,
    language_distribution,
    match_histogram,
    quadrant_counts,
    size_stats,
    write_report,
)


def kept(anchor, w=300, h=300, lang=None, fast=0.5, img=0.5, txt=0.3, drop=None, quadrant="kept_both"):
    return ManifestRow(anchor, 0, 1, "u", "c", fast, img, txt, w, h, lang, quadrant, drop)


def test_published_totals():
    # 28,572 results spread over 2,582 of 3,456 anchors
    rows = [kept(a % 2582) for a in range(28_572)]
    cov = coverage_stats(rows, 3456)
    assert f"{100 * cov['coverage_fraction']:.2f}" == "74.71"
    assert f"{cov['mean_matches_per_contributing_anchor']:.1f}" == "11.1"
    assert "coverage=74.71%" in format_coverage(cov)


def test_coverage_simple_cases():
    cov = coverage_stats([kept(a) for a in range(5)], 5)
    assert cov["coverage_fraction"] == 1.0 and cov["mean_matches_per_contributing_anchor"] == 1.0
    none = coverage_stats([kept(0, drop="below_both")], 4)
    assert none["coverage_fraction"] == 0.0
    assert none["mean_matches_per_contributing_anchor"] == 0.0 and not none["mean_defined"]
    with pytest.raises(ZeroAnchors):
        coverage_stats([], 0)


def test_histogram_example():
    rows = [kept(0)] * 3 + [kept(1)] * 3
    assert match_histogram(rows, 3) == {0: 1, 3: 2}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.booleans()), max_size=80))
def test_histogram_conservation(spec):
    rows = [kept(a, drop=None if k else "too_small") for a, k in spec]
    hist = match_histogram(rows, 10)
    assert sum(c * f for c, f in hist.items()) == sum(k for _, k in spec)
    assert sum(hist.values()) == 10


def test_histogram_matches_tally_on_fixture_run(fixture_run):
    out, _ = fixture_run
    rows = read_manifest(out / "candidates.csv")
    total = int(read_key_values(out / "run_stats.txt")["anchors_total"])
    oracle_rows = [{"anchor_id": r.anchor_id, "drop_stage": r.drop_stage} for r in rows]
    assert match_histogram(rows, total) == oracles.tally_per_anchor(oracle_rows, total)


def test_size_examples():
    s = size_stats([kept(0, w=300, h=256), kept(0, w=400, h=1010)])
    assert s["mean_height"] == 633.0 and s["max_height"] == 1010 and s["max_width"] == 400
    one = size_stats([kept(0, w=812, h=611)])
    assert (one["mean_width"], one["mean_height"]) == (812.0, 611.0)


def test_size_against_plain_tabulation():
    rng = np.random.default_rng(8)
    dims = [(int(w), int(h)) for w, h in rng.integers(256, 20_000, (100, 2))]
    s = size_stats([kept(0, w=w, h=h) for w, h in dims])
    assert s["mean_width"] == round(statistics.fmean(w for w, _ in dims), 1)
    assert s["mean_height"] == round(statistics.fmean(h for _, h in dims), 1)
    assert s["max_width"] == max(w for w, _ in dims)


def test_language_examples():
    dist, unl = language_distribution([kept(0, lang=x) for x in ("en", "en", "de", None)])
    assert dist == pytest.approx({"en": 2 / 3, "de": 1 / 3}) and unl == 1
    assert language_distribution([kept(0)] * 3) == ({}, 3)
    rows = [kept(0, lang="en")] * 401 + [kept(0, lang="xx")] * 599
    assert f"{100 * language_distribution(rows)[0]['en']:.1f}" == "40.1"


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["en", "de", "fr", "ja", None]), min_size=1, max_size=50))
def test_language_fractions_sum_to_one(tags):
    dist, unl = language_distribution([kept(0, lang=t) for t in tags])
    assert unl == tags.count(None)
    if dist:
        assert abs(sum(dist.values()) - 1.0) <= 1e-9


def test_divergence_exact_scorer_sits_on_diagonal():
    rng = np.random.default_rng(1)
    v = rng.uniform(-1, 1, 500)
    rep = divergence_report([(float(x), float(x)) for x in v])
    assert rep.n == 500 and int(rep.counts.sum()) == 500
    assert int(np.trace(rep.counts)) == 500
    assert rep.overestimation_rate == 0.0 and rep.max_abs_diff == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5)), max_size=80), st.integers(1, 50))
def test_divergence_conservation(pairs, bins):
    rep = divergence_report(pairs, bins=bins)
    assert int(rep.counts.sum()) == len(pairs) == rep.n
    assert rep.overestimated == sum(f > e for f, e in pairs)


def test_quadrant_counts_sum_to_scored():
    rows = [kept(0, quadrant=q) for q in ("kept_both", "neither", "neither", None, "visual_only")]
    q = quadrant_counts(rows)
    assert q == {"kept_both": 1, "visual_only": 1, "semantic_only": 0, "neither": 2}
    assert sum(q.values()) == 4


def test_min_text_sim_is_strict():
    rows = [kept(0, txt=0.22), kept(1, txt=0.2201), kept(2, txt=0.5)]
    s = build_stats(rows, 3, min_text_sim=0.22)
    assert s.coverage["kept_rows"] == 2 and s.filters == {"min_text_sim": 0.22}


def test_report_files_and_reproducibility(fixture_run, tmp_path):
    out, _ = fixture_run
    rows = read_manifest(out / "manifest.csv")
    total = int(read_key_values(out / "run_stats.txt")["anchors_total"])
    write_report(build_stats(rows, total), tmp_path / "a")
    write_report(build_stats(read_manifest(out / "manifest.csv"), total), tmp_path / "b")
    names = ("stats.txt", "fig2_histogram.csv", "fig3_divergence.csv", "quadrants.csv", "languages.csv")
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / name).read_bytes() == (out / name).read_bytes()
    stats = read_key_values(tmp_path / "a" / "stats.txt")
    assert int(stats["kept_rows"]) == len(rows)
