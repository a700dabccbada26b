"""Run configuration: a plain ``key = value`` text file plus flag overrides.

Format rules: one ``key = value`` per line, ``#`` starts a comment, blank
lines are ignored, keys may appear once. Relative paths resolve against the
directory holding the config file. Unknown keys are rejected.

Presets (the published releases):

    ver0   k = 100
    ver1   k = 1000

Both record the released filtering thresholds (image 0.78026, text 0.14919)
as reference constants; they are reported, not applied, unless
``tau_image`` / ``tau_text`` are set explicitly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import MissingRequired, ParseError, UnknownKey

log = logging.getLogger(__name__)

PRESETS = {
    "ver0": {"k": 100},
    "ver1": {"k": 1000},
}
REFERENCE_TAU_IMAGE = 0.78026
REFERENCE_TAU_TEXT = 0.14919
DEFAULT_K = 100

_PATH_KEYS = ("index", "embeddings", "corpus", "corpus_exact", "anchors", "text_ref", "out_dir")
_REQUIRED = ("index", "corpus", "corpus_exact", "anchors", "text_ref")


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _choice(*allowed):
    def conv(v):
        s = str(v).strip()
        if s not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {s!r}")
        return s

    return conv


def _opt(conv):
    def wrapped(v):
        if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none")):
            return None
        return conv(v)

    return wrapped


_CONVERTERS = {
    "index": str,
    "embeddings": str,
    "corpus": str,
    "corpus_exact": str,
    "anchors": str,
    "text_ref": str,
    "out_dir": str,
    "preset": _opt(_choice(*PRESETS)),
    "k": _opt(int),
    "min_dim": int,
    "multiplier": float,
    "seed": int,
    "nlist": _opt(int),
    "nprobe": _opt(int),
    "pq": _bool,
    "pq_m": _opt(int),
    "kmeans_max_iter": int,
    "timeout_ms": int,
    "retries": int,
    "max_concurrent_fetches": int,
    "max_bytes": int,
    "politeness_delay_ms": int,
    "jobs": _opt(int),
    "threshold_population": _choice("validated", "all"),
    "std": _choice("population", "sample"),
    "tau_image": _opt(float),
    "tau_text": _opt(float),
    "keep_dropped": _bool,
    "language_column": str,
}


@dataclass
class RunConfig:
    index: Path | None = None
    embeddings: Path | None = None  # when set, the index is (re)built from these rows
    corpus: Path | None = None
    corpus_exact: Path | None = None
    anchors: Path | None = None
    text_ref: Path | None = None
    out_dir: Path = Path("out")
    preset: str | None = None
    k: int = DEFAULT_K
    min_dim: int = 256
    multiplier: float = 1.5
    seed: int = 0
    nlist: int | None = None
    nprobe: int | None = None
    pq: bool = True
    pq_m: int | None = None
    kmeans_max_iter: int = 25
    timeout_ms: int = 10_000
    retries: int = 2
    max_concurrent_fetches: int = 16
    max_bytes: int = 64 * 1024 * 1024
    politeness_delay_ms: int = 0
    jobs: int | None = None
    threshold_population: str = "validated"
    std: str = "population"
    tau_image: float | None = None
    tau_text: float | None = None
    keep_dropped: bool = False
    language_column: str = "language"
    source: Path | None = field(default=None, compare=False)

    @property
    def reference_thresholds(self) -> tuple[float, float] | None:
        if self.preset is None:
            return None
        return REFERENCE_TAU_IMAGE, REFERENCE_TAU_TEXT

    def validate(self) -> RunConfig:
        missing = [k for k in _REQUIRED if getattr(self, k) is None]
        if missing:
            raise MissingRequired(f"missing required config keys: {', '.join(missing)}")
        if self.k < 1:
            raise ParseError("k must be >= 1")
        if self.min_dim < 1:
            raise ParseError("min_dim must be >= 1")
        if self.multiplier < 0:
            raise ParseError("multiplier must be non-negative")
        if self.retries < 0 or self.max_concurrent_fetches < 1 or self.timeout_ms < 1:
            raise ParseError("fetch settings out of range")
        if self.jobs is not None and self.jobs < 1:
            raise ParseError("jobs must be >= 1")
        return self


def read_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError(f"{origin}:{lineno}: empty key")
        if key not in _CONVERTERS:
            raise UnknownKey(key)
        if key in values:
            raise ParseError(f"{origin}:{lineno}: key {key!r} given twice")
        values[key] = value
    return values


def parse_config(path=None, overrides: dict | None = None, require: bool = True) -> RunConfig:
    """Build a :class:`RunConfig` from a file and flag overrides (flags win)."""
    raw: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read config {path}: {exc}") from exc
        raw = read_config_text(text, str(path))
        base = path.parent
    file_keys = set(raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _CONVERTERS:
            raise UnknownKey(key)
        raw[key] = value

    kwargs = {}
    for key, value in raw.items():
        try:
            conv = _CONVERTERS[key](value)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad value for {key!r}: {exc}") from exc
        if key in _PATH_KEYS and conv is not None:
            p = Path(conv)
            if key in file_keys and key not in (overrides or {}) and not p.is_absolute():
                p = base / p
            conv = p
        kwargs[key] = conv

    preset = kwargs.get("preset")
    if preset is not None:
        preset_k = PRESETS[preset]["k"]
        if kwargs.get("k") is None:
            kwargs["k"] = preset_k
        elif kwargs["k"] != preset_k:
            log.warning("event=preset_override preset=%s preset_k=%d k=%d", preset, preset_k, kwargs["k"])
    if kwargs.get("k") is None:
        kwargs.pop("k", None)

    known = {f.name for f in fields(RunConfig)}
    cfg = RunConfig(**{k: v for k, v in kwargs.items() if k in known}, source=path)
    return cfg.validate() if require else cfg


def dump_config(cfg: RunConfig) -> str:
    """Render a config back to the text format (paths as given)."""
    lines = []
    for f in fields(RunConfig):
        if f.name == "source":
            continue
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
