"""Knowledge graph loading, indexing and the probing-task variants."""

from __future__ import annotations

import dataclasses
import enum
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class Direction(enum.IntEnum):
    """Which slot of a triple a ranking query asks for."""

    HEAD = 0
    TAIL = 1


class GraphFormatError(ValueError):
    pass


class EmptyProbeError(ValueError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.int64).reshape(-1, 3)
    arr.setflags(write=False)
    return arr


def _build_truth(triples: Iterable[np.ndarray]) -> dict:
    truth: dict = defaultdict(set)
    for block in triples:
        for h, r, t in block.tolist():
            truth[(h, r, Direction.TAIL)].add(t)
            truth[(t, r, Direction.HEAD)].add(h)
    return {k: frozenset(v) for k, v in truth.items()}


@dataclass(frozen=True)
class KnowledgeGraph:
    """Immutable graph with split triples and entity/relation text.

    Triples are ``(n, 3)`` int64 arrays of ``(head, relation, tail)`` ids.
    ``truth_index[(e, r, Direction.TAIL)]`` holds every tail ``t`` with
    ``(e, r, t)`` known true; ``Direction.HEAD`` keys are indexed by the
    tail and hold heads. ``extra`` carries true triples that sit in no split
    (used by probe graphs so filtering still sees the full original truth).
    """

    entities: tuple
    relations: tuple
    train: np.ndarray
    dev: np.ndarray
    test: np.ndarray
    entity_text: tuple
    relation_text: tuple
    extra: np.ndarray = field(default_factory=lambda: _freeze(np.zeros((0, 3))))
    truth_index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for name in ("train", "dev", "test", "extra"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        if self.truth_index is None:
            object.__setattr__(
                self, "truth_index", _build_truth([self.train, self.dev, self.test, self.extra])
            )
        seen_e = np.zeros(len(self.entities), dtype=bool)
        seen_r = np.zeros(len(self.relations), dtype=bool)
        if len(self.train):
            seen_e[self.train[:, 0]] = True
            seen_e[self.train[:, 2]] = True
            seen_r[self.train[:, 1]] = True
        seen_e.setflags(write=False)
        seen_r.setflags(write=False)
        object.__setattr__(self, "_seen_entity", seen_e)
        object.__setattr__(self, "_seen_relation", seen_r)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def split(self, name: str) -> np.ndarray:
        if name in ("valid", "validation"):
            name = "dev"
        if name not in ("train", "dev", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def true_completions(self, fixed: int, rel: int, direction: Direction) -> frozenset:
        return self.truth_index.get((int(fixed), int(rel), Direction(direction)), frozenset())

    def entity_seen(self, e: int) -> bool:
        return bool(self._seen_entity[e])

    def relation_seen(self, r: int) -> bool:
        return bool(self._seen_relation[r])

    def summary(self) -> dict:
        unseen = [unseen_in_train(self, tp) for tp in self.test]
        return {
            "entities": self.n_entities,
            "relations": self.n_relations,
            "train": int(len(self.train)),
            "dev": int(len(self.dev)),
            "test": int(len(self.test)),
            "test_with_unseen_entity": int(sum(u[0] or u[2] for u in unseen)),
            "test_with_unseen_relation": int(sum(u[1] for u in unseen)),
        }


def _read_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line


def _read_triples(path, ent_ids: dict, rel_ids: dict) -> np.ndarray:
    rows = []
    seen = set()
    dups = 0
    for lineno, line in _read_lines(Path(path)):
        parts = line.split("\t")
        if len(parts) != 3 or not all(p.strip() for p in parts):
            raise GraphFormatError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail, got {line!r}")
        h, r, t = (p.strip() for p in parts)
        key = (
            ent_ids.setdefault(h, len(ent_ids)),
            rel_ids.setdefault(r, len(rel_ids)),
            ent_ids.setdefault(t, len(ent_ids)),
        )
        if key in seen:
            dups += 1
            continue
        seen.add(key)
        rows.append(key)
    if dups:
        logger.warning("%s: dropped %d duplicate triples", path, dups)
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def _read_text(path) -> dict:
    out = {}
    for lineno, line in _read_lines(Path(path)):
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) < 2:
            raise GraphFormatError(f"{path}:{lineno}: expected id<TAB>text, got {line!r}")
        key, name = parts[0], parts[1]
        desc = parts[2] if len(parts) > 2 else ""
        out[key] = f"{name} {desc}" if name and desc else (name or desc)
    return out


def load_graph(
    train_path,
    dev_path,
    test_path,
    entity_text_path=None,
    relation_text_path=None,
    extra_path=None,
) -> KnowledgeGraph:
    """Load a benchmark-style graph from tab-separated files.

    Entities and relations get dense ids in order of first appearance
    (train, dev, test, then text-only entries). Dev/test may reference
    elements absent from train; they are registered and reported as unseen.
    Text files are ``id<TAB>text`` or ``id<TAB>name<TAB>description``.
    ``extra_path`` holds true triples outside every split (filtering only).
    """
    ent_ids: dict = {}
    rel_ids: dict = {}
    train = _read_triples(train_path, ent_ids, rel_ids)
    dev = _read_triples(dev_path, ent_ids, rel_ids)
    test = _read_triples(test_path, ent_ids, rel_ids)
    extra = _read_triples(extra_path, ent_ids, rel_ids) if extra_path else ()

    ent_text = _read_text(entity_text_path) if entity_text_path else {}
    rel_text = _read_text(relation_text_path) if relation_text_path else {}
    for key in ent_text:
        ent_ids.setdefault(key, len(ent_ids))

    entities = tuple(sorted(ent_ids, key=ent_ids.get))
    relations = tuple(sorted(rel_ids, key=rel_ids.get))
    kg = from_triples(entities, relations, train, dev, test, ent_text, rel_text, extra)
    logger.info("loaded graph: %s", kg.summary())
    return kg


def from_triples(
    entities: Sequence[str],
    relations: Sequence[str],
    train,
    dev=(),
    test=(),
    entity_text: Optional[dict] = None,
    relation_text: Optional[dict] = None,
    extra=(),
) -> KnowledgeGraph:
    """Build a graph from id arrays; text dicts are keyed by surface key."""
    entity_text = entity_text or {}
    relation_text = relation_text or {}
    splits = [_freeze(np.asarray(s, dtype=np.int64).reshape(-1, 3)) for s in (train, dev, test)]
    for s in splits:
        if len(s) and (s[:, [0, 2]].max() >= len(entities) or s[:, 1].max() >= len(relations) or s.min() < 0):
            raise GraphFormatError("triple references an unregistered id")
    keysets = [set(map(tuple, s.tolist())) for s in splits]
    for i in range(3):
        for j in range(i + 1, 3):
            if keysets[i] & keysets[j]:
                raise GraphFormatError("splits are not disjoint as triple sets")

    missing = [k for k in entities if not entity_text.get(k)] + [k for k in relations if not relation_text.get(k)]
    if missing:
        logger.warning("%d ids have no text; falling back to surface keys", len(missing))
    ent_text = tuple(entity_text.get(k) or k for k in entities)
    rel_text = tuple(relation_text.get(k) or k for k in relations)
    extra = _freeze(np.asarray(extra, dtype=np.int64).reshape(-1, 3))
    return KnowledgeGraph(tuple(entities), tuple(relations), *splits, ent_text, rel_text, extra)


def unseen_in_train(kg: KnowledgeGraph, item) -> tuple:
    """Per-slot unseen flags.

    ``item`` is a triple ``(h, r, t)`` (returns three booleans) or a single
    entity id (returns one boolean).
    """
    if np.ndim(item) == 0:
        return not kg.entity_seen(int(item))
    h, r, t = (int(x) for x in item)
    return (not kg.entity_seen(h), not kg.relation_seen(r), not kg.entity_seen(t))


@dataclass(frozen=True)
class ProbeSpec:
    kind: str
    seed: int = 0
    n_removed: int = 0

    def __post_init__(self):
        if self.kind not in ("probe1", "probe2", "probe3"):
            raise ValueError(f"unknown probe kind {self.kind!r}")


def probe2_removed(kg: KnowledgeGraph, probe: ProbeSpec) -> np.ndarray:
    """Sorted ids of the entities probe2 samples out of the test-entity pool."""
    if not 0 < probe.n_removed < kg.n_entities:
        raise ValueError("probe2 requires 0 < n_removed < number of entities")
    pool = np.unique(kg.test[:, [0, 2]]) if len(kg.test) else np.zeros(0, dtype=np.int64)
    if probe.n_removed > len(pool):
        raise ValueError(f"probe2: only {len(pool)} test entities, cannot remove {probe.n_removed}")
    rng = np.random.default_rng(probe.seed)
    return np.sort(rng.choice(pool, size=probe.n_removed, replace=False))


def build_probe(kg: KnowledgeGraph, probe: ProbeSpec):
    """Derive a probing graph. Returns ``(graph, support)``.

    ``support`` is an ``(n, 3)`` array for probe2 and ``None`` otherwise.
    Triples dropped from the splits are kept in ``extra`` so the filtered
    evaluation still knows about them.
    """
    support = None
    train, test = kg.train, kg.test
    if probe.kind == "probe1":
        flags = np.array([u[0] or u[2] for u in map(lambda tp: unseen_in_train(kg, tp), test)], dtype=bool)
        new_train, new_test = train, test[flags] if len(test) else test
    elif probe.kind == "probe3":
        flags = np.array([not any(unseen_in_train(kg, tp)) for tp in test], dtype=bool)
        new_train, new_test = train, test[flags] if len(test) else test
    else:
        removed = np.zeros(kg.n_entities, dtype=bool)
        removed[probe2_removed(kg, probe)] = True
        hits = removed[train[:, 0]].astype(int) + removed[train[:, 2]].astype(int)
        new_train = train[hits == 0]
        support = train[hits == 1]
        support.setflags(write=False)
        new_test = test[removed[test[:, 0]] | removed[test[:, 2]]]
    if len(new_test) == 0:
        raise EmptyProbeError(f"{probe.kind} yields an empty test set")
    kept = {tuple(x) for x in np.concatenate([new_train, kg.dev, new_test]).tolist()}
    everything = np.concatenate([kg.train, kg.dev, kg.test, kg.extra])
    extra = np.array([tp for tp in everything.tolist() if tuple(tp) not in kept], dtype=np.int64)
    graph = dataclasses.replace(kg, train=new_train, test=new_test, extra=extra.reshape(-1, 3), truth_index=None)
    return graph, support


_LEXICON = (
    "alpha beta gamma delta river stone forest bright silent copper amber north "
    "harbor valley ember quartz meadow cedar falcon lunar prism tide willow zenith "
    "crimson orbit maple glacier drift echo fable granite hollow iris jade kestrel"
).split()


def make_synthetic_graph(
    n_entities: int = 200,
    n_relations: int = 10,
    heads_per_relation: Optional[int] = None,
    dim: int = 8,
    words_per_entity: int = 3,
    split=(0.8, 0.1, 0.1),
    seed: int = 0,
) -> KnowledgeGraph:
    """Random graph with latent translational structure.

    Entities get latent points; each relation is a latent offset and maps a
    head to the entity nearest ``head + offset``. Text for entity ``i`` is
    ``"e<i>"`` followed by ``words_per_entity`` lexicon words.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_entities, dim))
    offsets = rng.normal(size=(n_relations, dim))
    heads_per_relation = heads_per_relation or n_entities // 2
    rows = set()
    for r in range(n_relations):
        for h in rng.choice(n_entities, size=heads_per_relation, replace=False):
            d = np.linalg.norm(x - (x[h] + offsets[r]), axis=1)
            d[h] = np.inf
            rows.add((int(h), r, int(np.argmin(d))))
    triples = np.array(sorted(rows), dtype=np.int64)
    triples = triples[rng.permutation(len(triples))]
    n_train = int(round(split[0] * len(triples)))
    n_dev = int(round(split[1] * len(triples)))
    ents = [f"e{i}" for i in range(n_entities)]
    rels = [f"r{i}" for i in range(n_relations)]
    ent_text = {k: " ".join([k, *rng.choice(_LEXICON, size=words_per_entity)]) for k in ents}
    rel_text = {k: f"relation {k}" for k in rels}
    return from_triples(
        ents,
        rels,
        triples[:n_train],
        triples[n_train : n_train + n_dev],
        triples[n_train + n_dev :],
        ent_text,
        rel_text,
    )
