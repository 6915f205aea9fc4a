"""TransE and RotatE baselines: scoring, margin training, inductive completion."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
import torch

from .kg import Direction, KnowledgeGraph
from .training import TrainingDiverged, TripleFilter, corrupt_batch

logger = logging.getLogger(__name__)

TRANSE, ROTATE = "transe", "rotate"


@dataclass
class GeoConfig:
    kind: str = TRANSE
    dim: int = 64
    margin: float = 0.3
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 256
    n_negatives: int = 10
    p: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (TRANSE, ROTATE):
            raise ValueError(f"unknown geo model {self.kind!r}")
        if self.kind == ROTATE and self.dim % 2:
            raise ValueError("RotatE needs an even real dimension")

    def to_dict(self):
        return asdict(self)


@dataclass
class GeoEmbeddings:
    """Entity rows are real vectors (TransE) or interleaved (re, im) pairs
    (RotatE). RotatE relations are stored as one phase per complex dimension."""

    kind: str
    entity: np.ndarray
    relation: np.ndarray
    p: int = 2
    entity_keys: Optional[tuple] = None
    relation_keys: Optional[tuple] = None

    def copy(self) -> "GeoEmbeddings":
        return replace(self, entity=self.entity.copy(), relation=self.relation.copy())


def align_to_graph(emb: GeoEmbeddings, kg: KnowledgeGraph) -> GeoEmbeddings:
    """Reorder rows so ids follow ``kg``'s numbering, matching by surface key.

    Embeddings without keys are assumed to share the graph's numbering.
    Graph entities the embeddings never saw get zero rows (fill them with
    ``inductive_complete``); unknown relations raise ``KeyError``.
    """
    if emb.entity_keys is None:
        if emb.entity.shape[0] != kg.n_entities or emb.relation.shape[0] != kg.n_relations:
            raise ValueError("embedding table sizes do not match the graph")
        return emb
    e_row = {k: i for i, k in enumerate(emb.entity_keys)}
    r_row = {k: i for i, k in enumerate(emb.relation_keys)}
    missing_r = [k for k in kg.relations if k not in r_row]
    if missing_r:
        raise KeyError(f"relations without embeddings: {missing_r[:5]}")
    ent = np.zeros((kg.n_entities, emb.entity.shape[1]))
    for i, k in enumerate(kg.entities):
        if k in e_row:
            ent[i] = emb.entity[e_row[k]]
    rel = emb.relation[[r_row[k] for k in kg.relations]]
    return GeoEmbeddings(emb.kind, ent, rel, emb.p, tuple(kg.entities), tuple(kg.relations))


def _as_complex(x: np.ndarray) -> np.ndarray:
    return x[..., 0::2] + 1j * x[..., 1::2]


def _as_interleaved(z: np.ndarray) -> np.ndarray:
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def transe_score(emb: GeoEmbeddings, triple) -> float:
    h, r, t = (int(x) for x in triple)
    return -float(np.linalg.norm(emb.entity[h] + emb.relation[r] - emb.entity[t], ord=emb.p))


def rotate_score(emb: GeoEmbeddings, triple) -> float:
    h, r, t = (int(x) for x in triple)
    rot = np.exp(1j * emb.relation[r])
    return -float(np.linalg.norm(_as_complex(emb.entity[h]) * rot - _as_complex(emb.entity[t])))


def score_triple(emb: GeoEmbeddings, triple) -> float:
    return transe_score(emb, triple) if emb.kind == TRANSE else rotate_score(emb, triple)


def score_candidates(emb: GeoEmbeddings, fixed: int, rel: int, direction: Direction) -> np.ndarray:
    """Scores of every entity filling the open slot of ``(fixed, rel)``."""
    if emb.kind == TRANSE:
        if direction is Direction.TAIL:
            diff = emb.entity[fixed] + emb.relation[rel] - emb.entity
        else:
            diff = emb.entity + emb.relation[rel] - emb.entity[fixed]
        return -np.linalg.norm(diff, ord=emb.p, axis=1)
    z = _as_complex(emb.entity)
    rot = np.exp(1j * emb.relation[rel])
    diff = z[fixed] * rot - z if direction is Direction.TAIL else z * rot - z[fixed]
    return -np.linalg.norm(diff, axis=1)


class GeoScorer:
    """Evaluation adapter (see ``evaluation.evaluate``)."""

    def __init__(self, emb: GeoEmbeddings):
        self.emb = emb

    def prepare(self, kg, counter):
        pass

    def raw(self, q):
        return {"score": score_candidates(self.emb, q.fixed, q.rel, q.direction)}

    def combine(self, raw, candidates, basis=None):
        return raw["score"]


def init_embeddings(cfg: GeoConfig, n_entities: int, n_relations: int) -> GeoEmbeddings:
    rng = np.random.default_rng(cfg.seed)
    bound = 6 / np.sqrt(cfg.dim)
    ent = rng.uniform(-bound, bound, size=(n_entities, cfg.dim))
    if cfg.kind == TRANSE:
        rel = rng.uniform(-bound, bound, size=(n_relations, cfg.dim))
        rel /= np.linalg.norm(rel, axis=1, keepdims=True)
        ent /= np.maximum(np.linalg.norm(ent, axis=1, keepdims=True), 1.0)
    else:
        rel = rng.uniform(-np.pi, np.pi, size=(n_relations, cfg.dim // 2))
    return GeoEmbeddings(cfg.kind, ent, rel, cfg.p)


def _torch_scores(kind, p, ent, rel, triples):
    h, r, t = ent[triples[..., 0]], rel[triples[..., 1]], ent[triples[..., 2]]
    if kind == TRANSE:
        return -torch.linalg.vector_norm(h + r - t, ord=p, dim=-1)
    hre, him, tre, tim = h[..., 0::2], h[..., 1::2], t[..., 0::2], t[..., 1::2]
    c, s = torch.cos(r), torch.sin(r)
    dre = hre * c - him * s - tre
    dim_ = hre * s + him * c - tim
    return -torch.sqrt((dre**2 + dim_**2).sum(-1) + 1e-18)


def geo_loss(kind, p, ent, rel, pos, neg, margin):
    sp = _torch_scores(kind, p, ent, rel, pos)
    sn = _torch_scores(kind, p, ent, rel, neg)
    return torch.relu(margin - sp[:, None] + sn).mean()


def train_geo(kg: KnowledgeGraph, cfg: Optional[GeoConfig] = None, init: Optional[GeoEmbeddings] = None):
    """Margin-ranking training with uniform corruptions; returns ``(embeddings, history)``.

    TransE entity rows are projected back into the unit L2 ball after every step.
    """
    cfg = cfg or GeoConfig()
    emb = init.copy() if init is not None else init_embeddings(cfg, kg.n_entities, kg.n_relations)
    emb = replace(emb, entity_keys=tuple(kg.entities), relation_keys=tuple(kg.relations))
    history = []
    if cfg.epochs == 0 or len(kg.train) == 0:
        return emb, history
    rng = np.random.default_rng(cfg.seed + 1)
    filt = TripleFilter(kg.train, kg.n_entities, kg.n_relations)
    ent = torch.tensor(emb.entity, requires_grad=True)
    rel = torch.tensor(emb.relation, requires_grad=True)
    opt = torch.optim.Adam([ent, rel], lr=cfg.learning_rate)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(kg.train))
        total, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            pos = kg.train[order[start : start + cfg.batch_size]]
            neg = corrupt_batch(kg.n_entities, pos, cfg.n_negatives, rng, filt)
            loss = geo_loss(cfg.kind, cfg.p, ent, rel, torch.as_tensor(pos), torch.as_tensor(neg), cfg.margin)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite geo loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if cfg.kind == TRANSE:
                with torch.no_grad():
                    norm = torch.linalg.vector_norm(ent, dim=1, keepdim=True)
                    # rows already on the sphere are left alone so the projection is idempotent
                    ent /= torch.where(norm > 1 + 1e-12, norm, torch.ones_like(norm))
            total += loss.item()
            n += 1
        history.append({"epoch": epoch, "loss": total / n})
    logger.info("geo training done: final loss %.4f", history[-1]["loss"])
    out = GeoEmbeddings(cfg.kind, ent.detach().numpy().copy(), rel.detach().numpy().copy(), cfg.p, tuple(kg.entities), tuple(kg.relations))
    return out, history


def inductive_complete(emb: GeoEmbeddings, support: np.ndarray, unseen, kind: Optional[str] = None):
    """Embeddings for ``unseen`` entities solved from support triples and averaged.

    Each support triple contributes ``h + r`` (unseen tail) or ``t - r``
    (unseen head) for TransE, and ``h * r`` or ``t * conj(r)`` for RotatE.
    Returns ``(embeddings, unsupported)``; unsupported entities keep their
    current rows.
    """
    kind = kind or emb.kind
    out = emb.copy()
    unseen = set(int(e) for e in unseen)
    acc = {e: [] for e in unseen}
    for h, r, t in np.asarray(support).reshape(-1, 3).tolist():
        if (h in unseen) == (t in unseen):
            continue
        if kind == TRANSE:
            if t in unseen:
                acc[t].append(emb.entity[h] + emb.relation[r])
            else:
                acc[h].append(emb.entity[t] - emb.relation[r])
        else:
            rot = np.exp(1j * emb.relation[r])
            if t in unseen:
                acc[t].append(_as_interleaved(_as_complex(emb.entity[h]) * rot))
            else:
                acc[h].append(_as_interleaved(_as_complex(emb.entity[t]) * np.conj(rot)))
    unsupported = sorted(e for e, vs in acc.items() if not vs)
    for e, vs in acc.items():
        if vs:
            out.entity[e] = np.mean(vs, axis=0)
    if unsupported:
        logger.warning("%d unseen entities have no support triples", len(unsupported))
    return out, unsupported
