import os
from pathlib import Path

import numpy as np
import pytest
import torch

from star_kgc.encoder import EncoderConfig, TextBank, Vocabulary
from star_kgc.kg import from_triples, load_graph, make_synthetic_graph
from star_kgc.scoring import StarModel

ROOT = Path(__file__).resolve().parents[1]
UMLS = ROOT / "data" / "umls"

# Filled by tests/test_acceptance.py, printed once at the end of the session.
ACCEPTANCE: dict = {}


def umls_available() -> bool:
    return all((UMLS / f).exists() for f in ("train.tsv", "valid.tsv", "test.tsv"))


needs_umls = pytest.mark.skipif(not umls_available(), reason="UMLS files not found under data/umls")


@pytest.fixture(scope="session")
def umls():
    if not umls_available():
        pytest.skip("UMLS files not found under data/umls")
    return load_graph(
        UMLS / "train.tsv", UMLS / "valid.tsv", UMLS / "test.tsv", UMLS / "entity2text.tsv", UMLS / "relation2text.tsv"
    )


@pytest.fixture(scope="session")
def synth():
    return make_synthetic_graph(n_entities=60, n_relations=5, seed=3)


@pytest.fixture
def toy():
    """Four entities A..D, two relations; (A, r, B) and (A, r, C) are true."""
    ents = ("A", "B", "C", "D")
    rels = ("r", "s")
    train = [(0, 0, 1), (0, 0, 2), (1, 1, 3)]
    test = [(2, 1, 3)]
    return from_triples(ents, rels, train, (), test, {"A": "alpha", "B": "beta", "C": "gamma", "D": "delta"}, {"r": "likes", "s": "sees"})


def tiny_model(kg, d_h=16, layers=1, seed=0, metric="negl2", dropout=0.0):
    cfg = EncoderConfig(d_h=d_h, n_layers=layers, n_heads=2, d_ff=2 * d_h, max_len_hr=12, max_len_t=8, dropout=dropout, seed=seed)
    model = StarModel(cfg, Vocabulary.from_graph(kg), metric=metric)
    return model, TextBank(kg, model.vocab, model.cfg)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def rng(seed=0):
    return np.random.default_rng(seed)


def cache_dir():
    """Optional on-disk cache of trained models for faster local iteration."""
    d = os.environ.get("STAR_KGC_TEST_CACHE")
    return Path(d) if d else None
