"""Filtered link-prediction evaluation and encoder cost accounting."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .encoder import TextBank, precompute_entity_reps
from .kg import Direction, KnowledgeGraph
from .scoring import RankingBasis, combine_basis


@dataclass
class CostCounter:
    """Encoder calls and summed squared sequence lengths, split by encoder kind."""

    encoder_calls: int = 0
    sq_len_cost: int = 0
    by_kind: dict = field(default_factory=lambda: defaultdict(lambda: [0, 0]))

    def record(self, n_tokens: int, kind: str = "siamese"):
        self.encoder_calls += 1
        self.sq_len_cost += n_tokens * n_tokens
        self.by_kind[kind][0] += 1
        self.by_kind[kind][1] += n_tokens * n_tokens

    def to_dict(self) -> dict:
        return {
            "encoder_calls": self.encoder_calls,
            "sq_len_cost": self.sq_len_cost,
            "by_kind": {k: {"calls": c, "sq_len_cost": s} for k, (c, s) in sorted(self.by_kind.items())},
        }


@dataclass(frozen=True)
class RankingQuery:
    query_id: int
    triple: tuple
    direction: Direction

    @property
    def gold(self) -> int:
        return self.triple[0] if self.direction is Direction.HEAD else self.triple[2]

    @property
    def fixed(self) -> int:
        return self.triple[2] if self.direction is Direction.HEAD else self.triple[0]

    @property
    def rel(self) -> int:
        return self.triple[1]


def make_queries(triples: np.ndarray, directions=(Direction.HEAD, Direction.TAIL)) -> list:
    """Two queries per triple; ``query_id = 2 * triple_index + direction``."""
    out = []
    for i, tp in enumerate(np.asarray(triples).reshape(-1, 3).tolist()):
        for d in directions:
            d = Direction(d)
            out.append(RankingQuery(2 * i + int(d), tuple(tp), d))
    return out


@dataclass
class RankRecord:
    query: RankingQuery
    rank: int
    gold_score: float
    top: list

    def to_dict(self) -> dict:
        return {
            "query_id": self.query.query_id,
            "triple": list(self.query.triple),
            "direction": self.query.direction.name.lower(),
            "rank": self.rank,
            "gold_score": self.gold_score,
            "top": self.top,
        }


def filtered_candidates(kg: KnowledgeGraph, query: RankingQuery, self_loop_filter: bool = False) -> np.ndarray:
    """All entities minus other known-true completions (gold kept)."""
    mask = np.ones(kg.n_entities, dtype=bool)
    others = [e for e in kg.true_completions(query.fixed, query.rel, query.direction) if e != query.gold]
    mask[others] = False
    if self_loop_filter and query.fixed != query.gold:
        mask[query.fixed] = False
    return np.flatnonzero(mask)


def rank_gold(scores, candidates, gold: int, rng: np.random.Generator) -> int:
    """1-based rank of ``gold`` with uniform random placement inside its tie block."""
    scores = np.asarray(scores)
    pos = np.flatnonzero(np.asarray(candidates) == gold)
    if len(pos) == 0:
        raise ValueError(f"gold entity {gold} is not among the candidates")
    g = scores[pos[0]]
    higher = int(np.count_nonzero(scores > g))
    ties = int(np.count_nonzero(scores == g))
    return 1 + higher + int(rng.integers(ties))


@dataclass
class MetricsReport:
    count: int
    mr: Optional[float]
    mrr: Optional[float]
    hits: dict
    by_direction: dict = field(default_factory=dict)
    by_relation: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    records: list = field(default_factory=list, repr=False)
    score_blocks: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        out = {
            "count": self.count,
            "mr": self.mr,
            "mrr": self.mrr,
            "hits": {str(k): v for k, v in sorted(self.hits.items())},
        }
        if self.by_direction:
            out["by_direction"] = {k: v.to_dict() for k, v in self.by_direction.items()}
        if self.by_relation:
            out["by_relation"] = {str(k): v.to_dict() for k, v in sorted(self.by_relation.items())}
        if self.cost:
            out["cost"] = self.cost
        return out


def metrics_from_ranks(ranks: Iterable[int], ks=(1, 3, 10)) -> MetricsReport:
    r = np.asarray(list(ranks), dtype=np.float64)
    if r.size == 0:
        return MetricsReport(0, None, None, {k: None for k in ks})
    return MetricsReport(
        count=int(r.size),
        mr=float(r.mean()),
        mrr=float((1.0 / r).mean()),
        hits={k: float((r <= k).mean()) for k in ks},
    )


class StarScorer:
    """Siamese scoring: entity cache once, one hr encoding per distinct (entity, relation)."""

    def __init__(self, model, bank: TextBank, basis=RankingBasis.SC, use_cache: bool = True, cache=None):
        self.model = model
        self.bank = bank
        self.basis = RankingBasis(basis)
        self.use_cache = use_cache
        self.cache = cache

    def prepare(self, kg: KnowledgeGraph, counter: CostCounter):
        self.model.eval()
        self.cache = precompute_entity_reps(self.model, self.bank, counter, self.cache)
        self.hr = {}
        self.counter = counter

    def _entity_reps(self):
        if self.use_cache:
            return self.cache.reps
        return precompute_entity_reps(self.model, self.bank, self.counter).reps

    def _hr(self, pairs):
        missing = [p for p in pairs if p not in self.hr]
        if missing:
            with torch.no_grad():
                u = self.model.encode_hr(self.bank, missing, self.counter)
            self.hr.update(zip(missing, u))
        return torch.stack([self.hr[p] for p in pairs])

    @torch.no_grad()
    def raw(self, q: RankingQuery) -> dict:
        reps = self._entity_reps()
        if q.direction is Direction.TAIL:
            u = self._hr([(q.fixed, q.rel)])
            _, s_c, s_d = self.model.scores(u, reps)
        else:
            u = self._hr([(e, q.rel) for e in range(len(reps))])
            _, s_c, s_d = self.model.scores(u, reps[q.fixed][None])
        return {"s_c": s_c.double().numpy(), "s_d": s_d.double().numpy()}

    def combine(self, raw: dict, candidates: np.ndarray, basis=None) -> np.ndarray:
        basis = RankingBasis(basis or self.basis)
        ctx = raw["s_d"][candidates] if basis in (RankingBasis.SUM, RankingBasis.PROD) else None
        return combine_basis(raw["s_c"], raw["s_d"], basis, ctx)


class CrossEncoderScorer:
    """Cross-encoder scoring: one encoder call per candidate triple."""

    def __init__(self, model, bank: TextBank, batch_size: int = 256):
        self.model = model
        self.bank = bank
        self.batch_size = batch_size

    def prepare(self, kg, counter):
        self.model.eval()
        self.n = kg.n_entities
        self.counter = counter

    @torch.no_grad()
    def raw(self, q: RankingQuery) -> dict:
        h, r, t = q.triple
        if q.direction is Direction.TAIL:
            triples = [(h, r, e) for e in range(self.n)]
        else:
            triples = [(e, r, t) for e in range(self.n)]
        out = [
            self.model.score_triples(self.bank, triples[i : i + self.batch_size], self.counter)
            for i in range(0, len(triples), self.batch_size)
        ]
        return {"score": torch.cat(out).double().numpy()}

    def combine(self, raw, candidates, basis=None):
        return raw["score"]


class MatrixScorer:
    """Replays scores from a loaded score matrix (``{query_id: scores}``)."""

    def __init__(self, blocks: dict):
        self.blocks = blocks

    def prepare(self, kg, counter):
        pass

    def raw(self, q):
        return {"score": np.asarray(self.blocks[q.query_id][1], dtype=np.float64)}

    def combine(self, raw, candidates, basis=None):
        return raw["score"]


def evaluate(
    scorer,
    kg: KnowledgeGraph,
    split: str = "test",
    triples: Optional[np.ndarray] = None,
    basis=None,
    self_loop_filter: bool = False,
    directions: Sequence = (Direction.HEAD, Direction.TAIL),
    seed: int = 0,
    counter: Optional[CostCounter] = None,
    top_k: int = 10,
    keep_records: bool = False,
    keep_scores: bool = False,
) -> MetricsReport:
    """Filtered ranking of every query built from ``split`` (or ``triples``).

    Scores over all entities are kept per query when ``keep_scores`` is set,
    as ``(query_id, direction, scores)`` blocks for the score-matrix file.
    """
    triples = kg.split(split) if triples is None else np.asarray(triples).reshape(-1, 3)
    counter = counter if counter is not None else CostCounter()
    queries = make_queries(triples, directions)
    records, blocks = [], []
    ranks = []
    if queries:
        scorer.prepare(kg, counter)
    for q in queries:
        raw = scorer.raw(q)
        cands = filtered_candidates(kg, q, self_loop_filter)
        full = scorer.combine(raw, cands, basis)
        sc = full[cands]
        rank = rank_gold(sc, cands, q.gold, np.random.default_rng([seed, q.query_id]))
        ranks.append(rank)
        if keep_records:
            top = np.argsort(-sc, kind="stable")[:top_k]
            gold_score = float(sc[np.flatnonzero(cands == q.gold)[0]])
            records.append(RankRecord(q, rank, gold_score, [[int(cands[i]), float(sc[i])] for i in top]))
        if keep_scores:
            blocks.append((q.query_id, int(q.direction), np.asarray(full, dtype=np.float64)))
    report = metrics_from_ranks(ranks)
    ranks = np.asarray(ranks)
    for d in directions:
        d = Direction(d)
        sel = [i for i, q in enumerate(queries) if q.direction is d]
        report.by_direction[d.name.lower()] = metrics_from_ranks(ranks[sel])
    for rel in sorted({q.rel for q in queries}):
        sel = [i for i, q in enumerate(queries) if q.rel == rel]
        report.by_relation[rel] = metrics_from_ranks(ranks[sel])
    report.cost = counter.to_dict()
    report.records = records
    report.score_blocks = blocks
    return report


def score_queries(scorer, kg: KnowledgeGraph, pairs, direction=Direction.TAIL, counter: Optional[CostCounter] = None):
    """Run ``scorer`` over bare ``(fixed, relation)`` queries (no gold, no ranking).

    Used for whole-graph cost measurement. Returns the counter.
    """
    counter = counter if counter is not None else CostCounter()
    scorer.prepare(kg, counter)
    for i, (e, r) in enumerate(pairs):
        tp = (e, r, 0) if Direction(direction) is Direction.TAIL else (0, r, e)
        scorer.raw(RankingQuery(i, tp, Direction(direction)))
    return counter


def predicted_cost(strategy: str, L: float, n_entities: int, n_relations: int = 1, scope: str = "triple") -> float:
    """Squared-length encoder cost from the complexity table.

    ``strategy`` is ``"cross"`` or ``"siamese"``; ``scope`` is ``"triple"``
    (one incomplete triple) or ``"graph"`` (every (entity, relation) query).
    The Siamese encoder sees sequences of length ``L / 2``.
    """
    E, R = n_entities, n_relations
    if strategy == "cross":
        return L**2 * E if scope == "triple" else L**2 * E**2 * R
    if strategy == "siamese":
        return (L / 2) ** 2 * (1 + E) if scope == "triple" else (L / 2) ** 2 * E * (1 + R)
    raise ValueError(f"unknown strategy {strategy!r}")


def predicted_speedup(L: float, n_entities: int, n_relations: int = 1, scope: str = "graph") -> float:
    return predicted_cost("cross", L, n_entities, n_relations, scope) / predicted_cost(
        "siamese", L, n_entities, n_relations, scope
    )


def cost_from_lengths(bank: TextBank, pairs, n_entities: int) -> dict:
    """Exact squared-length cost of tail queries over ``pairs`` from actual sequence lengths.

    Siamese: each entity once plus each distinct pair once. Cross: every
    (pair, candidate) triple.
    """
    pairs = list(dict.fromkeys(map(tuple, pairs)))
    siamese = sum(len(bank.t(e)[0]) ** 2 for e in range(n_entities))
    siamese += sum(len(bank.hr(h, r)[0]) ** 2 for h, r in pairs)
    cross = sum(len(bank.triple(h, r, e)[0]) ** 2 for h, r in pairs for e in range(n_entities))
    return {"siamese": siamese, "cross": cross}


def all_corruptions(kg: KnowledgeGraph, triples, directions: Sequence = (Direction.TAIL,)) -> np.ndarray:
    """Every single-slot replacement of ``triples`` that is false under all splits, as ``(n, 3)``."""
    rows = []
    for q in make_queries(triples, directions):
        cands = filtered_candidates(kg, q)
        cands = cands[cands != q.gold]
        block = np.repeat(np.array(q.triple, dtype=np.int64)[None], len(cands), axis=0)
        block[:, 2 if q.direction is Direction.TAIL else 0] = cands
        rows.append(block)
    return np.concatenate(rows) if rows else np.zeros((0, 3), dtype=np.int64)


@torch.no_grad()
def confident_negative_rate(model, bank: TextBank, negatives, threshold: float = 0.9, batch_size: int = 512) -> float:
    """Fraction of (known false) triples whose plausibility ``s_c`` exceeds ``threshold``."""
    negs = np.asarray(negatives).reshape(-1, 3)
    model.eval()
    reps = precompute_entity_reps(model, bank).reps
    pairs = list(dict.fromkeys(map(tuple, negs[:, :2].tolist())))
    u = {}
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        u.update(zip(chunk, model.encode_hr(bank, chunk)))
    above = 0
    for i in range(0, len(negs), batch_size):
        chunk = negs[i : i + batch_size]
        uu = torch.stack([u[(h, r)] for h, r, _ in chunk.tolist()])
        _, s_c, _ = model.scores(uu, reps[torch.as_tensor(chunk[:, 2])])
        above += int((s_c > threshold).sum())
    return above / max(len(negs), 1)
