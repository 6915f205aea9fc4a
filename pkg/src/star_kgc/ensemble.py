"""Per-query blending of textual and graph-embedding scores over the
textual model's top-k candidates."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .evaluation import RankingQuery, filtered_candidates, make_queries, metrics_from_ranks
from .kg import Direction, KnowledgeGraph, unseen_in_train
from .scoring import rescale

logger = logging.getLogger(__name__)


class EnsembleInputError(ValueError):
    pass


@dataclass
class EnsembleConfig:
    k: int = 1000
    mode: str = "self_adaptive"
    alpha: float = 0.5
    margin: float = 0.6
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    n_negatives: int = 5
    m_sim: int = 100
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode not in ("self_adaptive", "fixed"):
            raise ValueError(f"unknown ensemble mode {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("fixed alpha must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


def rescale_scores(scores) -> np.ndarray:
    """Per-query min-max into [0, 1]; all-equal input gives 0.5."""
    return rescale(scores)


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a / np.where(na > 0, na, 1)) @ (b / np.where(nb > 0, nb, 1)).T


def similarity_means(reps: np.ndarray, m_sim: int) -> np.ndarray:
    """For every entity, mean of its ``m_sim`` largest cosine similarities to all entities (self included)."""
    sims = _cosine_matrix(reps, reps)
    m = min(m_sim, sims.shape[1])
    return np.sort(sims, axis=1)[:, -m:].mean(axis=1)


def ambiguity_degree(top_reps: np.ndarray, all_reps: np.ndarray, m_sim: int = 100) -> np.ndarray:
    """``[std over candidates per dimension; per-candidate mean of top-m_sim cosines]``."""
    top_reps = np.asarray(top_reps, dtype=np.float64)
    sims = _cosine_matrix(top_reps, np.asarray(all_reps, dtype=np.float64))
    m = min(m_sim, sims.shape[1])
    return np.concatenate([top_reps.std(axis=0), np.sort(sims, axis=1)[:, -m:].mean(axis=1)])


def score_consistency(s_tc, s_ge) -> np.ndarray:
    s_tc, s_ge = np.asarray(s_tc, dtype=np.float64), np.asarray(s_ge, dtype=np.float64)
    return np.concatenate([np.abs(s_tc - s_ge), s_tc + s_ge, s_tc, s_ge])


class AlphaMLP(nn.Module):
    """Feature vector to a blending weight in [0, 1] (logistic output)."""

    def __init__(self, d_in: int, hidden: int = 64, seed: int = 0):
        super().__init__()
        self.d_in = d_in
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.fc = nn.Linear(d_in, hidden)
            self.out = nn.Linear(hidden, 1)

    def forward(self, x):
        return torch.sigmoid(self.out(F.gelu(self.fc(x)))).squeeze(-1)


def adaptive_alpha(features, mlp: AlphaMLP, unseen: bool = False) -> float:
    if unseen:
        return 1.0
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(features), dtype=mlp.fc.weight.dtype)
        return float(mlp(x))


def blend(alpha, s_tc, s_ge):
    return alpha * np.asarray(s_tc) + (1 - alpha) * np.asarray(s_ge)


@dataclass
class PreparedQuery:
    """One query's inputs, with the top-k block already cut out."""

    query: RankingQuery
    top: np.ndarray
    s_tc: np.ndarray
    s_ge: np.ndarray
    rest: np.ndarray
    rest_s_tc: np.ndarray
    features: np.ndarray
    unseen: bool
    gold_in_top: int


def _top_k_order(s_tc: np.ndarray, k: int):
    order = np.argsort(-s_tc, kind="stable")
    return order[:k], order[k:]


def prepare_queries(
    kg: KnowledgeGraph,
    triples: np.ndarray,
    star_blocks: dict,
    geo_blocks: dict,
    reps: np.ndarray,
    cfg: EnsembleConfig,
    self_loop_filter: bool = False,
    directions: Sequence = (Direction.HEAD, Direction.TAIL),
) -> list:
    """Cut the top-k block and build features for every query of ``triples``.

    ``star_blocks``/``geo_blocks`` map ``query_id`` to ``(direction, scores
    over all entities)``, as read from score-matrix files. Textual scores
    outside [0, 1] are min-max rescaled over the candidate list.
    """
    reps = np.asarray(reps, dtype=np.float64)
    k = min(cfg.k, kg.n_entities)
    sim = similarity_means(reps, cfg.m_sim)
    out = []
    for q in make_queries(triples, directions):
        if q.query_id not in star_blocks or q.query_id not in geo_blocks:
            raise EnsembleInputError(f"query {q.query_id} missing from a score matrix")
        star, geo = np.asarray(star_blocks[q.query_id][1]), np.asarray(geo_blocks[q.query_id][1])
        if star.shape != geo.shape or star.shape[0] != kg.n_entities:
            raise EnsembleInputError(f"query {q.query_id}: candidate sets differ between score matrices")
        cands = filtered_candidates(kg, q, self_loop_filter)
        s_tc = star[cands]
        if s_tc.size and (s_tc.min() < 0 or s_tc.max() > 1):
            s_tc = rescale(s_tc)
        s_ge = rescale(geo[cands])
        top_i, rest_i = _top_k_order(s_tc, k)
        top = cands[top_i]
        x_ad = np.concatenate([reps[top].std(axis=0), sim[top]])
        x_sc = score_consistency(s_tc[top_i], s_ge[top_i])
        feats = _pad_features(x_ad, x_sc, reps.shape[1], k, len(top))
        hit = np.flatnonzero(top == q.gold)
        u = unseen_in_train(kg, q.triple)
        unseen = u[1] or (u[2] if q.direction is Direction.HEAD else u[0])
        out.append(
            PreparedQuery(q, top, s_tc[top_i], s_ge[top_i], cands[rest_i], s_tc[rest_i], feats, bool(unseen), int(hit[0]) if len(hit) else -1)
        )
    return out


def _pad_features(x_ad, x_sc, d, k, n):
    """Lay features out as ``[std (d); mean-sim (k); 4 x (k)]`` with zero padding when ``n < k``."""
    out = np.zeros(d + 5 * k)
    out[:d] = x_ad[:d]
    out[d : d + n] = x_ad[d:]
    for j in range(4):
        out[d + (j + 1) * k : d + (j + 1) * k + n] = x_sc[j * n : (j + 1) * n]
    return out


def ensemble_rerank(s_tc, s_ge, candidates, alpha: float, k: Optional[int] = None):
    """Re-rank the top-k (by ``s_tc``) with ``alpha*s_tc + (1-alpha)*s_ge``.

    Returns ``(ordered candidate ids, top-block size)``. Candidates outside
    the top-k keep their ``s_tc`` order after the block.
    """
    s_tc, s_ge, candidates = np.asarray(s_tc), np.asarray(s_ge), np.asarray(candidates)
    if not (len(s_tc) == len(s_ge) == len(candidates)):
        raise EnsembleInputError("score vectors and candidates differ in length")
    k = len(candidates) if k is None else min(k, len(candidates))
    top_i, rest_i = _top_k_order(s_tc, k)
    s_sa = blend(alpha, s_tc[top_i], s_ge[top_i])
    block = top_i[np.argsort(-s_sa, kind="stable")]
    return np.concatenate([candidates[block], candidates[rest_i]]), k


def _rank_in_block(scores, pos, rng):
    g = scores[pos]
    return 1 + int(np.count_nonzero(scores > g)) + int(rng.integers(np.count_nonzero(scores == g)))


def ensemble_rank(pq: PreparedQuery, alpha: float, rng: np.random.Generator) -> int:
    """Gold rank after re-ranking, RANDOM placement within ties."""
    if pq.gold_in_top >= 0:
        return _rank_in_block(blend(alpha, pq.s_tc, pq.s_ge), pq.gold_in_top, rng)
    pos = np.flatnonzero(pq.rest == pq.query.gold)[0]
    return len(pq.top) + _rank_in_block(pq.rest_s_tc, pos, rng)


class SelfAdaptiveEnsemble:
    """Fixed-alpha averaging or the learned per-query alpha."""

    def __init__(self, cfg: EnsembleConfig, d_in: Optional[int] = None):
        self.cfg = cfg
        self.mlp = AlphaMLP(d_in, cfg.hidden, cfg.seed) if cfg.mode == "self_adaptive" and d_in else None

    def alpha(self, pq: PreparedQuery) -> float:
        if self.cfg.mode == "fixed":
            return self.cfg.alpha
        if self.mlp is None:
            raise RuntimeError("self-adaptive ensemble has no trained alpha network")
        if pq.features.shape[0] != self.mlp.d_in:
            raise EnsembleInputError(f"feature width {pq.features.shape[0]} != trained width {self.mlp.d_in}")
        return adaptive_alpha(pq.features, self.mlp, pq.unseen)

    def evaluate(self, prepared: list, seed: int = 0):
        """Metrics over prepared queries; alpha per query is kept on ``report.alphas``."""
        ranks, alphas = [], []
        for pq in prepared:
            a = self.alpha(pq)
            alphas.append(a)
            ranks.append(ensemble_rank(pq, a, np.random.default_rng([seed, pq.query.query_id])))
        report = metrics_from_ranks(ranks)
        ranks = np.asarray(ranks)
        for d in (Direction.HEAD, Direction.TAIL):
            sel = [i for i, pq in enumerate(prepared) if pq.query.direction is d]
            if sel:
                report.by_direction[d.name.lower()] = metrics_from_ranks(ranks[sel])
        report.alphas = [(pq.query.query_id, a) for pq, a in zip(prepared, alphas)]
        return report


def ensemble_hinge_loss(mlp: AlphaMLP, batch: list, rng: np.random.Generator, cfg: EnsembleConfig):
    """Mean ``max(0, margin - s_sa(gold) + s_sa(neg))`` over sampled in-top-k negatives."""
    dtype = mlp.fc.weight.dtype
    x = torch.as_tensor(np.stack([pq.features for pq in batch]), dtype=dtype)
    alpha = mlp(x)
    losses = []
    for a, pq in zip(alpha, batch):
        others = np.delete(np.arange(len(pq.top)), pq.gold_in_top)
        negs = rng.choice(others, size=cfg.n_negatives, replace=len(others) < cfg.n_negatives)
        s_tc = torch.as_tensor(pq.s_tc, dtype=dtype)
        s_ge = torch.as_tensor(pq.s_ge, dtype=dtype)
        s_sa = a * s_tc + (1 - a) * s_ge
        g = pq.gold_in_top
        losses.append(torch.relu(cfg.margin - s_sa[g] + s_sa[torch.as_tensor(negs)]).mean())
    return torch.stack(losses).mean()


def trainable(pq: PreparedQuery) -> bool:
    return pq.gold_in_top >= 0 and not pq.unseen and len(pq.top) > 1


def train_ensemble(prepared: list, cfg: EnsembleConfig):
    """Fit the alpha network on prepared dev queries; base-model scores stay fixed.

    Queries whose gold falls outside the top-k (or that carry the unseen
    flag) give no gradient and are counted in ``stats["skipped"]``.
    """
    if not prepared:
        raise EnsembleInputError("no queries to train on")
    model = SelfAdaptiveEnsemble(cfg, d_in=prepared[0].features.shape[0])
    usable = [pq for pq in prepared if trainable(pq)]
    stats = {"queries": len(prepared), "skipped": len(prepared) - len(usable), "epochs": []}
    if cfg.mode == "fixed" or cfg.epochs == 0 or not usable:
        return model, stats
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.mlp.parameters(), lr=cfg.learning_rate)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(usable))
        total, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [usable[i] for i in order[start : start + cfg.batch_size]]
            loss = ensemble_hinge_loss(model.mlp, batch, rng, cfg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            n += 1
        stats["epochs"].append({"epoch": epoch, "loss": total / n})
    logger.info("ensemble training: %s", stats)
    return model, stats
