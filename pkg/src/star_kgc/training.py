"""Negative sampling, the classification/contrastive objectives and the
training loop for the Siamese model."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .encoder import EncoderConfig, TextBank, Vocabulary
from .kg import KnowledgeGraph
from .scoring import DistanceMetric, StarModel

logger = logging.getLogger(__name__)

EPS = 1e-12


class NegativeSamplingError(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    epochs: int = 20
    n_negatives: int = 5
    margin: float = 1.0
    gamma: float = 1.0
    dropout: float = 0.1
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    distance: str = "negl2"
    eval_every: int = 1
    dev_limit: Optional[int] = None

    def __post_init__(self):
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if self.margin < 0 or self.gamma < 0:
            raise ValueError("margin and gamma must be non-negative")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)


class TripleFilter:
    """Membership test for a set of triples, vectorized over int64 keys."""

    def __init__(self, triples: np.ndarray, n_entities: int, n_relations: int):
        self.n_e, self.n_r = n_entities, n_relations
        self.keys = np.unique(self.key(np.asarray(triples, dtype=np.int64).reshape(-1, 3)))

    def key(self, triples: np.ndarray) -> np.ndarray:
        return (triples[..., 0] * self.n_r + triples[..., 1]) * self.n_e + triples[..., 2]

    def __contains__(self, tp) -> bool:
        return bool(self.contains(np.asarray(tp)[None])[0])

    def contains(self, triples: np.ndarray) -> np.ndarray:
        k = self.key(triples)
        if len(self.keys) == 0:
            return np.zeros(k.shape, dtype=bool)
        idx = np.clip(np.searchsorted(self.keys, k), 0, len(self.keys) - 1)
        return self.keys[idx] == k


REFLIP = 50


def corrupt_batch(n_entities: int, positives: np.ndarray, m: int, rng: np.random.Generator, filt: TripleFilter) -> np.ndarray:
    """``(n, m, 3)`` corruptions: a fair coin picks head or tail once per
    negative, then a uniform entity is redrawn for that slot until the triple
    is outside ``filt`` and differs from the positive.  The coin is only
    re-flipped after ``REFLIP`` misses, so a saturated side cannot stall."""
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    out = np.repeat(positives[:, None, :], m, axis=1)
    todo = np.ones(out.shape[:2], dtype=bool)
    slot = np.where(rng.random(out.shape[:2]) < 0.5, 0, 2)
    misses = np.zeros(out.shape[:2], dtype=np.int64)
    tries = np.zeros(len(positives), dtype=np.int64)
    while todo.any():
        rows, cols = np.nonzero(todo)
        tries += np.bincount(rows, minlength=len(positives))
        if (tries > 1000 * m).any():
            bad = positives[np.argmax(tries > 1000 * m)]
            raise NegativeSamplingError(f"could not find {m} valid corruptions of {tuple(bad)} in {1000 * m} attempts")
        cand = positives[rows].copy()
        cand[np.arange(len(rows)), slot[rows, cols]] = rng.integers(n_entities, size=len(rows))
        ok = ~filt.contains(cand) & (cand != positives[rows]).any(axis=1)
        out[rows[ok], cols[ok]] = cand[ok]
        todo[rows[ok], cols[ok]] = False
        r, c = rows[~ok], cols[~ok]
        misses[r, c] += 1
        flip = misses[r, c] % REFLIP == 0
        slot[r[flip], c[flip]] = np.where(rng.random(int(flip.sum())) < 0.5, 0, 2)
    return out


def sample_negatives(kg: KnowledgeGraph, tp, m: int, rng: np.random.Generator, filt: Optional[TripleFilter] = None) -> np.ndarray:
    """``m`` independent corruptions of ``tp``; filter defaults to the train triples."""
    if m < 1:
        raise ValueError("m must be >= 1")
    filt = filt or TripleFilter(kg.train, kg.n_entities, kg.n_relations)
    return corrupt_batch(kg.n_entities, np.asarray(tp)[None], m, rng, filt)[0]


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def classification_loss(pos_scores, neg_scores):
    """Binary cross entropy over a positive and its negatives.

    ``pos_scores``: ``(B,)`` positive probabilities; ``neg_scores``: ``(B, m)``.
    Each positive's group is averaged over its ``1 + m`` terms, then the
    groups are averaged over the batch.
    """
    sp = _t(pos_scores).clamp(EPS, 1 - EPS)
    sn = _t(neg_scores).clamp(EPS, 1 - EPS)
    per = (torch.log(sp) + torch.log1p(-sn).sum(-1)) / (1 + sn.shape[-1])
    return -per.mean()


def classification_loss_from_logits(pos_logits, neg_logits):
    """Same objective computed from ``(.., 2)`` logits, stable at saturation."""
    floor = math.log(EPS)
    lp = torch.log_softmax(pos_logits, -1)[..., 1].clamp_min(floor)
    ln = torch.log_softmax(neg_logits, -1)[..., 0].clamp_min(floor)
    per = (lp + ln.sum(-1)) / (1 + ln.shape[-1])
    return -per.mean()


def contrastive_loss(pos_sd, neg_sd, margin: float):
    """Mean hinge ``max(0, margin - s_d + s_d')`` over negatives, then positives."""
    pos_sd, neg_sd = _t(pos_sd), _t(neg_sd)
    # margin + (s' - s) keeps the tied case exactly equal to the margin
    return torch.relu(margin + (neg_sd - pos_sd[..., None])).mean(-1).mean()


def total_loss(l_c, l_d, gamma: float):
    return l_c + gamma * l_d


def star_loss(model: StarModel, bank: TextBank, positives: np.ndarray, negatives: np.ndarray, margin: float, gamma: float):
    """``(loss, l_c, l_d)`` for positives ``(B, 3)`` and negatives ``(B, m, 3)``.

    Each distinct (head, relation) and tail in the batch is encoded once.
    """
    b, m = negatives.shape[:2]
    allt = np.concatenate([positives[:, None, :], negatives], axis=1).reshape(-1, 3)
    hr, hr_idx = np.unique(allt[:, :2], axis=0, return_inverse=True)
    ts, t_idx = np.unique(allt[:, 2], return_inverse=True)
    u = model.encode_hr(bank, hr.tolist())[torch.as_tensor(hr_idx.reshape(-1))]
    v = model.encode_t(bank, ts.tolist())[torch.as_tensor(t_idx.reshape(-1))]
    logits, _, s_d = model.scores(u, v)
    logits = logits.view(b, 1 + m, 2)
    s_d = s_d.view(b, 1 + m)
    l_c = classification_loss_from_logits(logits[:, 0], logits[:, 1:])
    l_d = contrastive_loss(s_d[:, 0], s_d[:, 1:], margin)
    return total_loss(l_c, l_d, gamma), l_c, l_d


def compute_gradients(loss, module: torch.nn.Module) -> dict:
    """Reverse-mode gradients of ``loss`` for every trainable tensor (zeros if unused)."""
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True, retain_graph=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(named, grads)}


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps zero gradients well defined."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], module: torch.nn.Module, n_coords: int = 256, eps: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between autograd and a five-point central stencil.

    ``loss_fn`` recomputes the loss from ``module``'s current parameters.
    Coordinates are spread over every trainable tensor in proportion to its
    size, with at least four per tensor. The fourth-order stencil lets ``eps``
    stay large enough that float64 roundoff does not swamp tiny gradients.
    """
    rng = np.random.default_rng(seed)
    grads = compute_gradients(loss_fn(), module)
    params = dict(module.named_parameters())
    total = sum(p.numel() for n, p in params.items() if n in grads)
    worst = 0.0
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            flat = p.view(-1)
            k = min(p.numel(), max(4, math.ceil(n_coords * p.numel() / total)))
            for i in rng.choice(p.numel(), size=k, replace=False):
                orig = flat[i].item()
                f = {}
                for step in (-2, -1, 1, 2):
                    flat[i] = orig + step * eps
                    f[step] = loss_fn().item()
                flat[i] = orig
                num = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * eps)
                worst = max(worst, float(relative_error(g.view(-1)[i].item(), num)))
    return worst


def gradient_check(
    model: StarModel,
    bank: TextBank,
    positives: np.ndarray,
    negatives: np.ndarray,
    which: str = "total",
    margin: float = 1.0,
    gamma: float = 1.0,
    eps: float = 1e-4,
    n_coords: int = 256,
    seed: int = 0,
) -> float:
    """Finite-difference check of one objective through the full encoder at float64.

    ``which`` is ``"classification"``, ``"contrastive"`` or ``"total"``.
    Works on a float64 copy in eval mode; ``model`` is left untouched.
    """
    pick = {"classification": 1, "contrastive": 2, "total": 0}[which]
    m64 = copy.deepcopy(model).double().eval()

    def loss_fn():
        return star_loss(m64, bank, positives, negatives, margin, gamma)[pick]

    return finite_difference_check(loss_fn, m64, n_coords=max(n_coords, 200), eps=eps, seed=seed)


def train_star(
    kg: KnowledgeGraph,
    enc_cfg: Optional[EncoderConfig] = None,
    cfg: Optional[TrainConfig] = None,
    model: Optional[StarModel] = None,
    on_epoch: Optional[Callable[[dict, StarModel], None]] = None,
):
    """Fit the Siamese model on ``kg.train``. Returns ``(model, history)``.

    ``history`` holds one record per epoch with mean losses and, when
    ``cfg.eval_every`` divides the epoch, dev Hits@10.
    """
    from .evaluation import StarScorer, evaluate

    cfg = cfg or TrainConfig()
    if model is None:
        enc_cfg = enc_cfg or EncoderConfig()
        enc_cfg.dropout = cfg.dropout
        model = StarModel(enc_cfg, Vocabulary.from_graph(kg), metric=cfg.distance)
    bank = TextBank(kg, model.vocab, model.cfg)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    filt = TripleFilter(kg.train, kg.n_entities, kg.n_relations)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(kg.train))
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            pos = kg.train[order[start : start + cfg.batch_size]]
            neg = corrupt_batch(kg.n_entities, pos, cfg.n_negatives, rng, filt)
            loss, l_c, l_d = star_loss(model, bank, pos, neg, cfg.margin, cfg.gamma)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {n_batches}: l_c={l_c.item()}, l_d={l_d.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.version += 1
            sums += (loss.item(), l_c.item(), l_d.item())
            n_batches += 1
        rec = {"epoch": epoch, "loss": sums[0] / n_batches, "l_c": sums[1] / n_batches, "l_d": sums[2] / n_batches}
        if cfg.eval_every and epoch % cfg.eval_every == 0 and len(kg.dev):
            dev = kg.dev if cfg.dev_limit is None else kg.dev[: cfg.dev_limit]
            report = evaluate(StarScorer(model, bank), kg, triples=dev, seed=cfg.seed)
            rec["dev_hits@10"] = report.hits[10]
        logger.info("epoch %s", rec)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, model)
    model.eval()
    return model, history
