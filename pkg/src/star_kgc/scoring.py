"""Triple scores from a (u, v) pair, ranking bases, and the cross-encoder baseline."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoder import EncoderConfig, TextBank, TransformerEncoder, Vocabulary, build_context_triple, encode_pooled, tokenize


class DistanceMetric(str, enum.Enum):
    NEGL2 = "negl2"
    BILINEAR = "bilinear"
    COSINE = "cosine"


class RankingBasis(str, enum.Enum):
    SC = "sc"
    SD = "sd"
    SUM = "sum"
    PROD = "prod"


def interactive_concat(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``[u; u*v; u-v; v]`` along the last axis."""
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {tuple(u.shape)} vs {tuple(v.shape)}")
    return torch.cat([u, u * v, u - v, v], dim=-1)


class ClassifierHead(nn.Module):
    """MLP from a feature vector to (negative, positive) logits; GELU hidden layer."""

    def __init__(self, d_in: int, hidden: int):
        super().__init__()
        self.fc = nn.Linear(d_in, hidden)
        self.out = nn.Linear(hidden, 2)

    def forward(self, c):
        return self.out(F.gelu(self.fc(c)))


def classify(c: torch.Tensor, head: nn.Module):
    """Returns ``(p, s_c)`` with ``p = softmax(head(c))`` and ``s_c = p[..., 1]``."""
    p = torch.softmax(head(c), dim=-1)
    return p, p[..., 1]


def distance_score(u, v, metric=DistanceMetric.NEGL2, weight: Optional[torch.Tensor] = None):
    metric = DistanceMetric(metric)
    if metric is DistanceMetric.NEGL2:
        return -torch.linalg.vector_norm(u - v, dim=-1)
    if metric is DistanceMetric.BILINEAR:
        if weight is None:
            weight = torch.eye(u.shape[-1], dtype=u.dtype)
        return ((u @ weight) * v).sum(-1)
    nu = torch.linalg.vector_norm(u, dim=-1)
    nv = torch.linalg.vector_norm(v, dim=-1)
    denom = nu * nv
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, (u * v).sum(-1) / safe, torch.zeros_like(denom))


def rescale(x) -> np.ndarray:
    """Min-max to [0, 1]; a constant vector maps to 0.5 everywhere."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def combine_basis(s_c, s_d, basis, rescale_context=None):
    """Ranking score for one or many candidates.

    ``rescale_context`` is the candidate list's ``s_d`` values (or a
    ``(min, max)`` pair), required for SUM and PROD.
    """
    basis = RankingBasis(basis)
    s_c = np.asarray(s_c, dtype=np.float64)
    s_d = np.asarray(s_d, dtype=np.float64)
    if basis is RankingBasis.SC:
        return s_c
    if basis is RankingBasis.SD:
        return s_d
    if rescale_context is None:
        raise ValueError(f"basis {basis.value} needs the candidate list's s_d range")
    ctx = np.asarray(rescale_context, dtype=np.float64)
    lo, hi = ctx.min(), ctx.max()
    scaled = np.full_like(s_d, 0.5) if hi == lo else (s_d - lo) / (hi - lo)
    return scaled + s_c if basis is RankingBasis.SUM else scaled * s_c


@dataclass
class ScoreBundle:
    s_c: float
    s_d: float
    basis: RankingBasis
    combined: float


class StarModel(nn.Module):
    """Shared Siamese encoder with the classifier head and distance metric."""

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, metric=DistanceMetric.NEGL2, hidden: Optional[int] = None):
        super().__init__()
        cfg.vocab_size = len(vocab)
        self.cfg = cfg
        self.vocab = vocab
        self.metric = DistanceMetric(metric)
        self.encoder = TransformerEncoder(cfg)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed + 1)
            self.head = ClassifierHead(4 * cfg.d_h, hidden or cfg.d_h)
        self.bilinear = nn.Parameter(torch.eye(cfg.d_h), requires_grad=self.metric is DistanceMetric.BILINEAR)
        self.version = 0

    def encode_hr(self, bank: TextBank, pairs, counter=None):
        return encode_pooled(self.encoder, [bank.hr(h, r) for h, r in pairs], counter)

    def encode_t(self, bank: TextBank, ents, counter=None):
        return encode_pooled(self.encoder, [bank.t(e) for e in ents], counter)

    def scores(self, u, v):
        """``(logits, s_c, s_d)`` for broadcastable ``u``/``v``."""
        u, v = torch.broadcast_tensors(u, v)
        logits = self.head(interactive_concat(u, v))
        s_c = torch.softmax(logits, dim=-1)[..., 1]
        s_d = distance_score(u, v, self.metric, self.bilinear)
        return logits, s_c, s_d

    def score_bundle(self, u, v, basis=RankingBasis.SC, rescale_context=None) -> ScoreBundle:
        with torch.no_grad():
            _, s_c, s_d = self.scores(u, v)
        s_c, s_d = float(s_c), float(s_d)
        combined = float(combine_basis(s_c, s_d, basis, rescale_context))
        return ScoreBundle(s_c, s_d, RankingBasis(basis), combined)


class CrossEncoder(nn.Module):
    """Full-triple encoder with its own two-way classifier over the pooled output."""

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, hidden: Optional[int] = None):
        super().__init__()
        cfg.vocab_size = len(vocab)
        self.cfg = cfg
        self.vocab = vocab
        self.encoder = TransformerEncoder(cfg)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed + 1)
            self.head = ClassifierHead(cfg.d_h, hidden or cfg.d_h)
        self.version = 0

    def score_triples(self, bank: TextBank, triples, counter=None):
        pooled = encode_pooled(self.encoder, [bank.triple(*tp) for tp in triples], counter, kind="cross")
        return classify(pooled, self.head)[1]


def cross_encoder_score(model: CrossEncoder, h_text: str, r_text: str, t_text: str, counter=None) -> float:
    v = model.vocab
    seq = build_context_triple(tokenize(h_text, v), tokenize(r_text, v), tokenize(t_text, v), model.cfg.max_len_triple)
    was = model.training
    model.eval()
    with torch.no_grad():
        s = classify(encode_pooled(model.encoder, [seq], counter, kind="cross"), model.head)[1]
    model.train(was)
    return float(s[0])
