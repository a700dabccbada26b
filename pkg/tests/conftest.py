import contextlib
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from anchorsift.cli import main
from anchorsift.embeddings import EmbeddingMatrix
from anchorsift.fixtures import generate_fixture_corpus
from anchorsift.index import IndexParams, build_index

FIXTURE_SEED = 7

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@contextlib.contextmanager
def record_criterion(num: int, title: str):
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        ACCEPTANCE[num] = (title, False, detail.get("info", "") or type(exc).__name__)
        print(f"criterion {num}: FAIL  {title} {detail.get('info', '')}")
        raise
    ACCEPTANCE[num] = (title, True, detail.get("info", ""))
    print(f"criterion {num}: PASS  {title} {detail.get('info', '')}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, info = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {title}  {info}".rstrip())


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(np.float32)


@pytest.fixture(scope="session")
def random_corpus():
    """10,000 random unit vectors in 64-D plus 100 random unit queries."""
    rng = np.random.default_rng(20240501)
    return EmbeddingMatrix(unit_rows(rng, 10_000, 64), normalized=True), unit_rows(rng, 100, 64)


@pytest.fixture(scope="session")
def flat_index(random_corpus):
    matrix, _ = random_corpus
    return build_index(matrix, IndexParams(nlist=64, nprobe=64, seed=1))


@pytest.fixture(scope="session")
def pq_index(random_corpus):
    matrix, _ = random_corpus
    return build_index(matrix, IndexParams(nlist=64, nprobe=16, pq_enabled=True, M=8, seed=1))


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    generate_fixture_corpus(out, seed=FIXTURE_SEED)
    return out


def cli_run(fixture_dir: Path, out_dir: Path, *extra) -> float:
    t0 = time.perf_counter()
    code = main([*extra, "run", "--config", str(fixture_dir / "run.conf"), "--out-dir", str(out_dir),
                 "--index", str(out_dir / "index.aivf")])
    assert code == 0
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def fixture_run(fixture_dir, tmp_path_factory):
    """One full CLI `run` over the generated fixture (preset ver0)."""
    out = tmp_path_factory.mktemp("run")
    elapsed = cli_run(fixture_dir, out)
    return out, elapsed
