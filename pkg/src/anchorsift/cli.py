"""Command-line entry point: ``anchorsift <subcommand> ...``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
Logs are ``key=value`` lines on stderr; data products go to files only.

Stage subcommands chain through files in ``out_dir``::

    query    -> query.csv      (one row per anchor/neighbour pair)
    rescore  -> rescored.csv   (URL dedup, fetch checks, exact scores)
    filter   -> manifest.csv, candidates.csv, thresholds.txt, run_stats.txt

``run`` does all three in memory and also writes the report tables.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import _kernels
from .config import parse_config
from .errors import AnchorSiftError, ConfigError, MissingRequired

log = logging.getLogger("anchorsift")

QUERY_FILE = "query.csv"
RESCORED_FILE = "rescored.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# flag -> (config key, type, help)
_PATH_FLAGS = {
    "--index": ("index", "IVF index file (.aivf)"),
    "--embeddings": ("embeddings", "corpus embeddings (.aemb); when given the index is built from them"),
    "--corpus": ("corpus", "corpus metadata CSV (record_id,url,caption[,language])"),
    "--corpus-exact": ("corpus_exact", "full-precision corpus embeddings (.aemb)"),
    "--anchors": ("anchors", "anchor embeddings (.aemb)"),
    "--text-ref": ("text_ref", "reference text embedding (.aemb, first row used)"),
    "--out-dir": ("out_dir", "output directory"),
}
_INDEX_FLAGS = {
    "--nlist": ("nlist", int, "number of coarse clusters (default ceil(sqrt(N)))"),
    "--nprobe": ("nprobe", int, "lists scanned per query (default nlist // 8)"),
    "--pq-m": ("pq_m", int, "PQ sub-quantizers (default dim // 8)"),
    "--kmeans-max-iter": ("kmeans_max_iter", int, "k-means iteration cap"),
    "--seed": ("seed", int, "seed for every random choice"),
}
_QUERY_FLAGS = {
    "--k": ("k", int, "neighbours per anchor (preset default)"),
}
_FETCH_FLAGS = {
    "--min-dim": ("min_dim", int, "minimum width and height in pixels (inclusive)"),
    "--timeout-ms": ("timeout_ms", int, "per-attempt fetch timeout in milliseconds"),
    "--retries": ("retries", int, "extra attempts after a failed fetch"),
    "--max-concurrent-fetches": ("max_concurrent_fetches", int, "fetch worker pool size"),
    "--max-bytes": ("max_bytes", int, "largest accepted response body"),
    "--politeness-delay-ms": ("politeness_delay_ms", int, "minimum gap between requests to one host"),
}
_FILTER_FLAGS = {
    "--multiplier": ("multiplier", float, "standard deviations below the mean for each threshold"),
    "--tau-image": ("tau_image", float, "fixed image threshold (skips the derived value)"),
    "--tau-text": ("tau_text", float, "fixed text threshold (skips the derived value)"),
}


def _add_config(p, *groups, preset=False, pq=False, filter_choices=False, keep_dropped=False):
    p.add_argument("--config", type=Path, help="run config file (key = value lines)")
    for name, (key, hlp) in _PATH_FLAGS.items():
        p.add_argument(name, dest=key, help=hlp)
    for group in groups:
        for name, (key, typ, hlp) in group.items():
            p.add_argument(name, dest=key, type=typ, help=hlp)
    if preset:
        p.add_argument("--preset", choices=("ver0", "ver1"), help="ver0: k=100, ver1: k=1000")
    if pq:
        p.add_argument("--pq", action=argparse.BooleanOptionalAction, default=None,
                       help="product-quantize stored vectors (default on)")
    if filter_choices:
        p.add_argument("--threshold-population", dest="threshold_population", choices=("validated", "all"),
                       help="candidates the thresholds are computed over")
        p.add_argument("--std", choices=("population", "sample"), help="standard deviation flavour")
    if keep_dropped:
        p.add_argument("--keep-dropped", dest="keep_dropped", action="store_const", const=True,
                       help="include dropped rows (with drop_stage) in manifest.csv")
    p.add_argument("--language-column", dest="language_column", help="corpus column holding language tags")


_CONFIG_KEYS = {key for key, _ in _PATH_FLAGS.values()} | {
    key for g in (_INDEX_FLAGS, _QUERY_FLAGS, _FETCH_FLAGS, _FILTER_FLAGS) for key, _, _ in g.values()
} | {"preset", "pq", "threshold_population", "std", "keep_dropped", "language_column", "jobs"}


def _load_config(args, *needed):
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    cfg = parse_config(args.config, overrides, require=False)
    missing = [k for k in needed if getattr(cfg, k) is None]
    if missing:
        raise MissingRequired(f"missing required settings: {', '.join(missing)}")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anchorsift", description="Anchor-driven subset extraction from an embedded image-text corpus.")
    parser.add_argument("--jobs", type=int, default=None, help="cap on every worker pool (threads and fetchers)")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"),
                        help="stderr log verbosity")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("normalize-anchors", help="Sentinel-2 reflectance grids -> 8-bit PNG")
    p.add_argument("inputs", nargs="+", type=Path, help="raw grid (.txt) or PNG files of reflectance x 10000")
    p.add_argument("--out-dir", required=True, type=Path, help="directory for the normalized PNGs")

    p = sub.add_parser("build-index", help="train and save an IVF(-PQ) index")
    _add_config(p, _INDEX_FLAGS, pq=True)

    p = sub.add_parser("query", help="k-NN query for every anchor -> query.csv")
    _add_config(p, _INDEX_FLAGS, _QUERY_FLAGS, preset=True, pq=True)

    p = sub.add_parser("rescore", help="URL dedup, fetch checks and exact scores -> rescored.csv")
    _add_config(p, _FETCH_FLAGS)
    p.add_argument("--input", type=Path, help=f"query stage output (default OUT_DIR/{QUERY_FILE})")

    p = sub.add_parser("filter", help="thresholds, quadrants and content dedup -> manifest.csv")
    _add_config(p, _FILTER_FLAGS, preset=True, filter_choices=True, keep_dropped=True)
    p.add_argument("--input", type=Path, help=f"rescore stage output (default OUT_DIR/{RESCORED_FILE})")
    p.add_argument("--anchors-total", type=int, help="anchor count (default: rows in the anchors file)")

    p = sub.add_parser("run", help="every stage end to end, plus the report")
    _add_config(p, _INDEX_FLAGS, _QUERY_FLAGS, _FETCH_FLAGS, _FILTER_FLAGS,
                preset=True, pq=True, filter_choices=True, keep_dropped=True)

    p = sub.add_parser("report", help="dataset statistics from a manifest CSV")
    p.add_argument("manifest", type=Path, help="manifest CSV (kept rows; dropped rows are ignored)")
    p.add_argument("--out-dir", type=Path, help="output directory (default: the manifest's directory)")
    p.add_argument("--anchors-total", type=int,
                   help="anchor count (default: run_stats.txt next to the manifest, else max anchor_id + 1)")
    p.add_argument("--min-text-sim", type=float, help="only count rows with text similarity above this value")
    p.add_argument("--bins", type=int, default=40, help="bins per axis of the fast/exact divergence table")
    p.add_argument("--language-column", default="language", help="manifest column holding language tags")

    p = sub.add_parser("gen-fixture", help="write a synthetic corpus with planted in-domain records")
    p.add_argument("--out-dir", required=True, type=Path, help="fixture directory")
    p.add_argument("--seed", type=int, default=0, help="fixture seed")
    p.add_argument("--n", type=int, default=5000, help="corpus size")
    p.add_argument("--dim", type=int, default=64, help="embedding dimension")
    p.add_argument("--planted-fraction", type=float, default=0.05, help="share of in-domain records")
    p.add_argument("--n-anchors", type=int, default=10, help="number of anchors")
    return parser


# -- subcommands ----------------------------------------------------------------


def cmd_normalize_anchors(args) -> int:
    from .anchors import normalize_anchor, read_anchor, write_png8

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.inputs:
        img = normalize_anchor(read_anchor(path))
        dest = args.out_dir / (path.stem + ".png")
        write_png8(img.values, dest)
        log.info("event=anchor_normalized input=%s output=%s applied_gain=%r", path, dest, img.applied_gain)
    return 0


def cmd_build_index(args) -> int:
    from .pipeline import prepare_index

    cfg = _load_config(args, "embeddings", "index")
    prepare_index(cfg)
    return 0


def _out_dir(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_query(args) -> int:
    from .embeddings import load_corpus, load_embeddings
    from .pipeline import candidate_rows, prepare_index, query_anchors, write_manifest

    cfg = _load_config(args, "index", "corpus", "anchors")
    index = prepare_index(cfg)
    anchors = load_embeddings(cfg.anchors, normalize=True)
    corpus = load_corpus(cfg.corpus, cfg.language_column)
    rows = candidate_rows(query_anchors(index, anchors, cfg.k, cfg.nprobe), corpus) if index.count else []
    dest = _out_dir(cfg) / QUERY_FILE
    write_manifest(rows, dest, include_dropped=True, extended=True)
    log.info("event=query anchors=%d candidates=%d output=%s", anchors.count, len(rows), dest)
    return 0


def cmd_rescore(args) -> int:
    from .embeddings import load_embeddings
    from .pipeline import read_manifest, settings_from_config, stage_validate, write_manifest

    cfg = _load_config(args, "corpus_exact", "anchors", "text_ref")
    out = _out_dir(cfg)
    rows = read_manifest(args.input or out / QUERY_FILE, cfg.language_column)
    exact = load_embeddings(cfg.corpus_exact, normalize=True)
    anchors = load_embeddings(cfg.anchors, normalize=True)
    text = load_embeddings(cfg.text_ref, normalize=True)
    stage_validate(rows, exact, anchors, text.rows[0], settings_from_config(cfg))
    write_manifest(rows, out / RESCORED_FILE, include_dropped=True, extended=True)
    return 0


def _write_outputs(rows, thresholds, stats, cfg) -> None:
    from .pipeline import threshold_dict, write_key_values, write_manifest

    out = _out_dir(cfg)
    ref = cfg.reference_thresholds
    if ref is not None:
        stats["preset"] = cfg.preset
        stats["reference_tau_image"], stats["reference_tau_text"] = ref
    write_manifest(rows, out / "manifest.csv", include_dropped=cfg.keep_dropped)
    write_manifest(rows, out / "candidates.csv", include_dropped=True, extended=True)
    write_key_values({} if thresholds is None else threshold_dict(thresholds), out / "thresholds.txt")
    write_key_values(stats, out / "run_stats.txt")


def cmd_filter(args) -> int:
    from .embeddings import load_embeddings
    from .pipeline import read_manifest, settings_from_config, stage_filter, summarize

    cfg = _load_config(args)
    out = _out_dir(cfg)
    rows = read_manifest(args.input or out / RESCORED_FILE, cfg.language_column)
    if args.anchors_total is not None:
        anchors_total = args.anchors_total
    elif cfg.anchors is not None:
        anchors_total = load_embeddings(cfg.anchors).count
    else:
        raise MissingRequired("filter needs --anchors-total or an anchors file")
    thresholds = stage_filter(rows, settings_from_config(cfg))
    _write_outputs(rows, thresholds, summarize(rows, thresholds, anchors_total), cfg)
    return 0


def cmd_run(args) -> int:
    from .pipeline import run_pipeline
    from .report import build_stats, write_report

    cfg = _load_config(args, "index", "corpus", "corpus_exact", "anchors", "text_ref")
    result = run_pipeline(cfg)
    if result.anchors_total:
        # same rows as manifest.csv, so `report` on that file reproduces these tables
        rows = result.rows if cfg.keep_dropped else result.manifest
        write_report(build_stats(rows, result.anchors_total), cfg.out_dir)
    log.info("event=run_done kept=%d candidates_in=%d out_dir=%s",
             result.stats["kept"], result.stats["candidates_in"], cfg.out_dir)
    return 0


def _anchors_total_for(manifest: Path, rows) -> int:
    from .pipeline import read_key_values

    stats = manifest.parent / "run_stats.txt"
    if stats.exists():
        v = read_key_values(stats).get("anchors_total")
        if v:
            return int(v)
    return max((r.anchor_id for r in rows), default=-1) + 1


def cmd_report(args) -> int:
    from .pipeline import read_manifest
    from .report import build_stats, format_coverage, write_report

    rows = read_manifest(args.manifest, args.language_column)
    total = args.anchors_total if args.anchors_total is not None else _anchors_total_for(args.manifest, rows)
    stats = build_stats(rows, total, min_text_sim=args.min_text_sim, bins=args.bins)
    write_report(stats, args.out_dir or args.manifest.parent)
    log.info("event=report %s", format_coverage(stats.coverage))
    return 0


def cmd_gen_fixture(args) -> int:
    from .fixtures import generate_fixture_corpus

    summary = generate_fixture_corpus(
        args.out_dir, seed=args.seed, n=args.n, dim=args.dim,
        planted_fraction=args.planted_fraction, n_anchors=args.n_anchors,
    )
    log.info("event=fixture_written out_dir=%s %s", args.out_dir, " ".join(f"{k}={v}" for k, v in summary.items()))
    return 0


COMMANDS = {
    "normalize-anchors": cmd_normalize_anchors,
    "build-index": cmd_build_index,
    "query": cmd_query,
    "rescore": cmd_rescore,
    "filter": cmd_filter,
    "run": cmd_run,
    "report": cmd_report,
    "gen-fixture": cmd_gen_fixture,
}


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("level=%(levelname)s logger=%(name)s %(message)s"))
    handler._anchorsift = True
    root = logging.getLogger()
    root.handlers[:] = [h for h in root.handlers if not getattr(h, "_anchorsift", False)] + [handler]
    root.setLevel(level)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"level=ERROR event=usage_error error={str(exc)!r}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    if args.jobs is not None and args.jobs < 1:
        log.error("event=usage_error error='--jobs must be >= 1'")
        return 1
    _kernels.set_threads(args.jobs)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("event=config_error type=%s error=%r", type(exc).__name__, str(exc))
        return 1
    except (AnchorSiftError, OSError, ValueError, KeyError) as exc:
        log.error("event=failed type=%s error=%r", type(exc).__name__, str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
