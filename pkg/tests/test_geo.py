import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from star_kgc.geo import (
    GeoConfig,
    GeoEmbeddings,
    GeoScorer,
    _torch_scores,
    align_to_graph,
    inductive_complete,
    init_embeddings,
    rotate_score,
    score_candidates,
    score_triple,
    train_geo,
    transe_score,
)
from star_kgc.kg import Direction, from_triples, make_synthetic_graph
from star_kgc.evaluation import evaluate


def transe(ent, rel, p=2):
    return GeoEmbeddings("transe", np.asarray(ent, float), np.asarray(rel, float), p)


def rotate(ent, phases):
    return GeoEmbeddings("rotate", np.asarray(ent, float), np.asarray(phases, float))


def test_transe_example():
    emb = transe([[0, 0], [0, 1]], [[1, 0]])
    assert transe_score(emb, (0, 0, 1)) == pytest.approx(-math.sqrt(2), abs=1e-15)
    assert transe_score(transe([[0, 0], [1, 0]], [[1, 0]]), (0, 0, 1)) == 0.0
    assert transe_score(transe([[0, 0], [0, 1]], [[1, 0]], p=1), (0, 0, 1)) == -2.0


def test_rotate_example():
    # h = 1, rotation by pi, t = -1
    emb = rotate([[1, 0], [-1, 0]], [[math.pi]])
    assert rotate_score(emb, (0, 0, 1)) == pytest.approx(0.0, abs=1e-15)
    assert rotate_score(emb, (0, 0, 0)) == pytest.approx(-2.0, abs=1e-15)


def test_rotate_zero_phase_is_plain_distance():
    rng = np.random.default_rng(0)
    ent = rng.normal(size=(5, 6))
    emb = rotate(ent, np.zeros((1, 3)))
    for h in range(5):
        for t in range(5):
            assert score_triple(emb, (h, 0, t)) == pytest.approx(-np.linalg.norm(ent[h] - ent[t]), abs=1e-12)


coords = st.integers(-100, 100).map(lambda x: x / 10)


@settings(max_examples=60, deadline=None)
@given(st.lists(coords, min_size=4, max_size=4), st.integers(0, 2**32 - 1))
def test_transe_translation_invariance(shift, seed):
    rng = np.random.default_rng(seed)
    ent, rel = rng.normal(size=(4, 4)), rng.normal(size=(2, 4))
    a, b = transe(ent, rel), transe(ent + np.asarray(shift), rel)
    for tp in [(0, 0, 1), (2, 1, 3), (3, 0, 3)]:
        assert score_triple(a, tp) == pytest.approx(score_triple(b, tp), abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.floats(-math.pi, math.pi), st.integers(0, 2**32 - 1))
def test_rotate_global_rotation_invariance(theta, seed):
    rng = np.random.default_rng(seed)
    ent, ph = rng.normal(size=(4, 6)), rng.uniform(-math.pi, math.pi, size=(2, 3))
    z = (ent[:, 0::2] + 1j * ent[:, 1::2]) * np.exp(1j * theta)
    rotated = np.empty_like(ent)
    rotated[:, 0::2], rotated[:, 1::2] = z.real, z.imag
    a, b = rotate(ent, ph), rotate(rotated, ph)
    for tp in [(0, 0, 1), (2, 1, 3), (3, 0, 3)]:
        assert score_triple(a, tp) == pytest.approx(score_triple(b, tp), abs=1e-6)


@pytest.mark.parametrize("kind", ["transe", "rotate"])
def test_candidate_scores_match_single_triples(kind):
    emb = init_embeddings(GeoConfig(kind=kind, dim=8, seed=1), 7, 2)
    for d in Direction:
        s = score_candidates(emb, 3, 1, d)
        for e in range(7):
            tp = (3, 1, e) if d is Direction.TAIL else (e, 1, 3)
            assert s[e] == pytest.approx(score_triple(emb, tp), abs=1e-12)


@pytest.mark.parametrize("kind", ["transe", "rotate"])
def test_training_scores_match_numpy(kind):
    emb = init_embeddings(GeoConfig(kind=kind, dim=8, seed=2), 6, 2)
    triples = np.array([[0, 0, 1], [5, 1, 2], [3, 0, 3]])
    got = _torch_scores(kind, emb.p, torch.tensor(emb.entity), torch.tensor(emb.relation), torch.as_tensor(triples))
    assert got.numpy() == pytest.approx([score_triple(emb, tp) for tp in triples], abs=1e-8)


def test_transe_init_inside_unit_ball():
    emb = init_embeddings(GeoConfig(dim=16), 30, 3)
    assert (np.linalg.norm(emb.entity, axis=1) <= 1 + 1e-12).all()
    assert np.linalg.norm(emb.relation, axis=1) == pytest.approx(np.ones(3))


@pytest.mark.parametrize("kind", ["transe", "rotate"])
def test_zero_learning_rate_is_no_op(synth, kind):
    cfg = GeoConfig(kind=kind, dim=8, margin=0.0, learning_rate=0.0, epochs=2, seed=5)
    init = init_embeddings(cfg, synth.n_entities, synth.n_relations)
    out, hist = train_geo(synth, cfg, init)
    assert np.array_equal(out.entity, init.entity) and np.array_equal(out.relation, init.relation)
    assert len(hist) == 2


def test_transe_stays_in_ball_and_separates(synth):
    cfg = GeoConfig(dim=16, epochs=60, learning_rate=0.05, batch_size=64, seed=0)
    emb, hist = train_geo(synth, cfg)
    assert (np.linalg.norm(emb.entity, axis=1) <= 1 + 1e-6).all()
    assert hist[-1]["loss"] < hist[0]["loss"]
    rng = np.random.default_rng(0)
    true = np.mean([score_triple(emb, tp) for tp in synth.train])
    fake = np.mean([score_triple(emb, (h, r, rng.integers(synth.n_entities))) for h, r, _ in synth.train])
    assert true > fake
    m = evaluate(GeoScorer(emb), synth, split="train")
    assert m.mrr > 0.2


def test_inductive_single_support_transe():
    emb = transe([[0.1, 0.2], [0.5, -0.3], [9.0, 9.0]], [[1.0, 0.0], [0.0, 2.0]])
    out, unsupported = inductive_complete(emb, np.array([[0, 1, 2]]), [2])
    assert out.entity[2].tolist() == pytest.approx([0.1, 2.2], abs=1e-15)
    assert unsupported == []
    assert emb.entity[2].tolist() == [9.0, 9.0]  # input untouched


def test_inductive_average_and_head_side_transe():
    emb = transe([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]], [[1.0, 0.0]])
    # (0, r, 2) suggests (1, 0); (2, r, 1) suggests t - r = (0, 1)
    out, _ = inductive_complete(emb, np.array([[0, 0, 2], [2, 0, 1]]), [2])
    assert out.entity[2].tolist() == pytest.approx([0.5, 0.5])


def test_inductive_skips_unsupported_and_unseen_pairs():
    emb = transe(np.arange(8, dtype=float).reshape(4, 2), [[1.0, 1.0]])
    out, unsupported = inductive_complete(emb, np.array([[2, 0, 3]]), [2, 3])
    assert unsupported == [2, 3]
    assert np.array_equal(out.entity, emb.entity)


def test_inductive_rotate_conjugate():
    rng = np.random.default_rng(3)
    ent = rng.normal(size=(3, 4))
    ph = rng.uniform(-math.pi, math.pi, size=(1, 2))
    emb = rotate(ent, ph)
    z = ent[:, 0::2] + 1j * ent[:, 1::2]
    r = np.cos(ph[0]) + 1j * np.sin(ph[0])
    out, _ = inductive_complete(emb, np.array([[2, 0, 0]]), [2])
    want = z[0] / r  # solves h * r = t
    got = out.entity[2, 0::2] + 1j * out.entity[2, 1::2]
    assert np.allclose(got, want, atol=1e-12)
    assert score_triple(out, (2, 0, 0)) == pytest.approx(0.0, abs=1e-12)
    out, _ = inductive_complete(emb, np.array([[1, 0, 2]]), [2])
    assert score_triple(out, (1, 0, 2)) == pytest.approx(0.0, abs=1e-12)


def test_align_to_graph_by_key():
    kg = from_triples(["a", "b", "c"], ["r", "s"], [(0, 0, 1)])
    emb = GeoEmbeddings("transe", np.array([[1.0], [2.0]]), np.array([[7.0], [8.0]]), 2, ("c", "a"), ("s", "r"))
    out = align_to_graph(emb, kg)
    assert out.entity[:, 0].tolist() == [2.0, 0.0, 1.0]
    assert out.relation[:, 0].tolist() == [8.0, 7.0]
    with pytest.raises(KeyError):
        align_to_graph(GeoEmbeddings("transe", emb.entity, emb.relation[:1], 2, ("c", "a"), ("s",)), kg)
    with pytest.raises(ValueError):
        align_to_graph(GeoEmbeddings("transe", emb.entity, emb.relation), kg)


def test_config_validation():
    with pytest.raises(ValueError):
        GeoConfig(kind="distmult")
    with pytest.raises(ValueError):
        GeoConfig(kind="rotate", dim=7)
