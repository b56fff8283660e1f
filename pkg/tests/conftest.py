import numpy as np
import pytest

from kgcap.data import build_vocabulary, load_dataset, read_manifest, tokenize
from kgcap.knowledge import load_triples
from kgcap.synthetic import make_synthetic, tiny_problem


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    make_synthetic(out, n_images=10, L=6, D=32, seed=0)
    return out


@pytest.fixture(scope="session")
def synthetic(synthetic_dir):
    """(records, vocab, triple index) for the 10-image synthetic corpus."""
    rows = read_manifest(synthetic_dir / "dataset.jsonl")
    vocab = build_vocabulary([tokenize(c) for r in rows for c in r["captions"]], 200)
    records = load_dataset(synthetic_dir / "dataset.jsonl", vocab)
    return records, vocab, load_triples(synthetic_dir / "triples.jsonl")


@pytest.fixture
def tiny():
    return tiny_problem(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
