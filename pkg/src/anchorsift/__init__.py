"""anchorsift: anchor-driven subset extraction from embedded image-text corpora."""

from .anchors import NormalizedAnchorImage, adaptive_gain, normalize_anchor
from .config import RunConfig, parse_config
from .embeddings import CorpusRecord, EmbeddingMatrix, cosine_sim, l2_normalize, load_embeddings, save_embeddings
from .errors import AnchorSiftError
from .fetchcheck import FetchResult, probe_dimensions, validate_candidate
from .index import IndexParams, IvfIndex, brute_force_topk, build_index, query, recall_at_k
from .pipeline import (
    FilterThresholds,
    ManifestRow,
    Quadrant,
    classify_quadrant,
    compute_thresholds,
    extract,
    run_pipeline,
)
from .report import build_stats, coverage_stats, divergence_report

__version__ = "0.1.0"
