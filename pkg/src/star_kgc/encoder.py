"""Word-level tokenization, the two asymmetric input sequences, and the
parameter-tied Transformer encoder shared by both branches."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Vocabulary:
    """Token to id map with fixed reserved ids 0..3."""

    RESERVED = (PAD, UNK, CLS, SEP)

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = list(self.RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    pad_id, unk_id, cls_id, sep_id = 0, 1, 2, 3

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        return cls(tok for text in texts for tok in split_words(text))

    @classmethod
    def from_graph(cls, kg) -> "Vocabulary":
        """Vocabulary over the text of elements that occur in training triples."""
        ents = np.unique(kg.train[:, [0, 2]]) if len(kg.train) else []
        rels = np.unique(kg.train[:, 1]) if len(kg.train) else []
        texts = [kg.entity_text[e] for e in ents] + [kg.relation_text[r] for r in rels]
        return cls.build(texts)


def split_words(text: str) -> list:
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary, max_len: Optional[int] = None, n_special: int = 3) -> list:
    """Lowercase, split on whitespace and punctuation, map to ids.

    With ``max_len`` set, keeps at most ``max_len - n_special`` content ids.
    """
    ids = [vocab.lookup(tok) for tok in split_words(text)]
    if max_len is not None:
        ids = ids[: max(0, max_len - n_special)]
    return ids


def build_context_hr(h_ids: Sequence[int], r_ids: Sequence[int], max_len: Optional[int] = None):
    """``[CLS] h [SEP] r [SEP]`` with entity segment 0 and relation segment 1.

    Overlong input loses entity tokens first, then relation tokens.
    """
    h_ids, r_ids = list(h_ids), list(r_ids)
    if max_len is not None:
        excess = len(h_ids) + len(r_ids) + 3 - max_len
        if excess > 0:
            cut = min(excess, len(h_ids))
            h_ids = h_ids[: len(h_ids) - cut]
            excess -= cut
            if excess > 0:
                r_ids = r_ids[: len(r_ids) - excess]
    ids = [Vocabulary.cls_id, *h_ids, Vocabulary.sep_id, *r_ids, Vocabulary.sep_id]
    segs = [0] * (len(h_ids) + 2) + [1] * (len(r_ids) + 1)
    return ids, segs


def build_context_t(t_ids: Sequence[int], max_len: Optional[int] = None):
    t_ids = list(t_ids)
    if max_len is not None:
        t_ids = t_ids[: max(0, max_len - 2)]
    ids = [Vocabulary.cls_id, *t_ids, Vocabulary.sep_id]
    return ids, [0] * len(ids)


def build_context_triple(h_ids, r_ids, t_ids, max_len: Optional[int] = None):
    """Cross-encoder input ``[CLS] h [SEP] r [SEP] t [SEP]``.

    Segments are 0/1/0 for head/relation/tail. Overflow trims the longer
    entity span one token at a time, so both shrink proportionally.
    """
    h_ids, r_ids, t_ids = list(h_ids), list(r_ids), list(t_ids)
    if max_len is not None:
        while len(h_ids) + len(r_ids) + len(t_ids) + 4 > max_len:
            if h_ids or t_ids:
                if len(h_ids) >= len(t_ids):
                    h_ids.pop()
                else:
                    t_ids.pop()
            else:
                r_ids.pop()
    ids = [Vocabulary.cls_id, *h_ids, Vocabulary.sep_id, *r_ids, Vocabulary.sep_id, *t_ids, Vocabulary.sep_id]
    segs = [0] * (len(h_ids) + 2) + [1] * (len(r_ids) + 1) + [0] * (len(t_ids) + 1)
    return ids, segs


@dataclass
class EncoderConfig:
    d_h: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len_hr: int = 32
    max_len_t: int = 32
    max_len_triple: Optional[int] = None
    vocab_size: int = 0
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_h % self.n_heads:
            raise ValueError("d_h must be divisible by n_heads")
        if min(self.max_len_hr, self.max_len_t) < 3:
            raise ValueError("max lengths must leave room for special tokens")
        if self.max_len_triple is None:
            self.max_len_triple = self.max_len_hr + self.max_len_t - 1

    @property
    def max_positions(self) -> int:
        return max(self.max_len_hr, self.max_len_t, self.max_len_triple)

    def to_dict(self) -> dict:
        return asdict(self)


class _Layer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_h, 3 * cfg.d_h)
        self.out = nn.Linear(cfg.d_h, cfg.d_h)
        self.ln1 = nn.LayerNorm(cfg.d_h)
        self.ff1 = nn.Linear(cfg.d_h, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_h)
        self.ln2 = nn.LayerNorm(cfg.d_h)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_mask):
        b, n, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).view(b, n, 3, self.n_heads, hd).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-1, -2) / math.sqrt(hd)
        att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = self.drop(torch.softmax(att, dim=-1))
        ctx = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = self.ln1(x + self.drop(self.out(ctx)))
        x = self.ln2(x + self.drop(self.ff2(F.gelu(self.ff1(x)))))
        return x


class TransformerEncoder(nn.Module):
    """Post-norm Transformer encoder over token + position + segment embeddings."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.vocab_size <= len(Vocabulary.RESERVED) - 1:
            raise ValueError("vocab_size must cover the reserved tokens")
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.tok = nn.Embedding(cfg.vocab_size, cfg.d_h, padding_idx=Vocabulary.pad_id)
            self.pos = nn.Embedding(cfg.max_positions, cfg.d_h)
            self.seg = nn.Embedding(2, cfg.d_h)
            for emb in (self.tok, self.pos, self.seg):
                nn.init.normal_(emb.weight, std=0.02)
            with torch.no_grad():
                self.tok.weight[Vocabulary.pad_id].zero_()
            self.layers = nn.ModuleList(_Layer(cfg) for _ in range(cfg.n_layers))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, ids: torch.Tensor, segs: torch.Tensor, key_mask: Optional[torch.Tensor] = None):
        """``ids``/``segs``: ``(B, n)`` long tensors. Returns ``(B, n, d_h)``."""
        n = ids.shape[1]
        if n > self.pos.num_embeddings:
            raise ValueError(f"sequence length {n} exceeds positional table {self.pos.num_embeddings}")
        if key_mask is None:
            key_mask = ids != Vocabulary.pad_id
        # position 0 always stays attendable so an all-[PAD] row cannot produce NaN
        key_mask = key_mask.clone()
        key_mask[:, 0] = True
        pos = torch.arange(n, device=ids.device)
        x = self.drop(self.tok(ids) + self.pos(pos)[None] + self.seg(segs))
        for layer in self.layers:
            x = layer(x, key_mask)
        return x


def collate(seqs: Sequence[tuple]):
    """Pad ``[(ids, segs), ...]`` into ``(ids, segs, mask)`` tensors."""
    n = max(len(ids) for ids, _ in seqs)
    ids = torch.full((len(seqs), n), Vocabulary.pad_id, dtype=torch.long)
    segs = torch.zeros((len(seqs), n), dtype=torch.long)
    for i, (a, s) in enumerate(seqs):
        ids[i, : len(a)] = torch.tensor(a, dtype=torch.long)
        segs[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return ids, segs, ids != Vocabulary.pad_id


def encode(encoder: TransformerEncoder, ids: Sequence[int], segs: Sequence[int]) -> torch.Tensor:
    """Encode one sequence; returns the ``d_h x n`` output matrix."""
    if len(ids) < 1:
        raise ValueError("cannot encode an empty sequence")
    t_ids = torch.tensor([list(ids)], dtype=torch.long)
    t_segs = torch.tensor([list(segs)], dtype=torch.long)
    return encoder(t_ids, t_segs)[0].T


def pool(matrix: torch.Tensor) -> torch.Tensor:
    """Representation of the ``[CLS]`` position (column 0)."""
    return matrix[:, 0]


def encode_pooled(encoder: TransformerEncoder, seqs: Sequence[tuple], counter=None, kind: str = "siamese"):
    """Batched encode + pool. Each sequence is one encoder call for ``counter``."""
    if counter is not None:
        for ids, _ in seqs:
            counter.record(len(ids), kind)
    ids, segs, mask = collate(seqs)
    return encoder(ids, segs, mask)[:, 0]


class TextBank:
    """Per-graph token ids for every entity and relation, plus sequence builders."""

    def __init__(self, kg, vocab: Vocabulary, cfg: EncoderConfig):
        self.vocab = vocab
        self.cfg = cfg
        self.ent = [tokenize(t, vocab) for t in kg.entity_text]
        self.rel = [tokenize(t, vocab) for t in kg.relation_text]

    def hr(self, h: int, r: int):
        return build_context_hr(self.ent[h], self.rel[r], self.cfg.max_len_hr)

    def t(self, e: int):
        return build_context_t(self.ent[e], self.cfg.max_len_t)

    def triple(self, h: int, r: int, t: int):
        return build_context_triple(self.ent[h], self.rel[r], self.ent[t], self.cfg.max_len_triple)


class RepPair(NamedTuple):
    u: torch.Tensor
    v: torch.Tensor


def encode_pair(encoder: TransformerEncoder, vocab: Vocabulary, h_text: str, r_text: str, t_text: str) -> RepPair:
    """Encode both branches of a triple through the same parameters."""
    cfg = encoder.cfg
    hr = build_context_hr(tokenize(h_text, vocab), tokenize(r_text, vocab), cfg.max_len_hr)
    t = build_context_t(tokenize(t_text, vocab), cfg.max_len_t)
    return RepPair(pool(encode(encoder, *hr)), pool(encode(encoder, *t)))


@dataclass
class EntityRepCache:
    reps: torch.Tensor  # (n_entities, d_h)
    version: int

    def __getitem__(self, e):
        return self.reps[e]


@torch.no_grad()
def precompute_entity_reps(model, bank: TextBank, counter=None, cache: Optional[EntityRepCache] = None) -> EntityRepCache:
    """Tail-branch representation of every entity, one encoder call each.

    ``model`` must expose ``encoder`` and ``version``; an up-to-date
    ``cache`` is returned untouched. Entities are encoded one at a time so
    a cached row is bit-identical to a fresh single-entity encode.
    """
    if cache is not None and cache.version == model.version:
        return cache
    was_training = model.training
    model.eval()
    rows = []
    for e in range(len(bank.ent)):
        seq = bank.t(e)
        if counter is not None:
            counter.record(len(seq[0]), "siamese")
        rows.append(pool(encode(model.encoder, *seq)))
    model.train(was_training)
    reps = torch.stack(rows) if rows else torch.zeros((0, model.encoder.cfg.d_h))
    return EntityRepCache(reps, model.version)
