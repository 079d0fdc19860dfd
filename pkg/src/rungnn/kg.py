"""Triple storage, augmentation and frontier expansion for knowledge graphs."""
from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

UNREACHABLE = np.iinfo(np.int64).max


class TripleParseError(ValueError):
    pass


class VocabularyError(KeyError):
    pass


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass
class Vocabulary:
    entity_names: list = field(default_factory=list)
    relation_names: list = field(default_factory=list)
    frozen: bool = False

    def __post_init__(self):
        self.entity_index = {name: i for i, name in enumerate(self.entity_names)}
        self.relation_index = {name: i for i, name in enumerate(self.relation_names)}
        if len(self.entity_index) != len(self.entity_names):
            raise ValueError("duplicate entity names")
        if len(self.relation_index) != len(self.relation_names):
            raise ValueError("duplicate relation names")

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def entity(self, name: str) -> int:
        idx = self.entity_index.get(name)
        if idx is None:
            if self.frozen:
                raise VocabularyError(f"unknown entity {name!r}")
            idx = len(self.entity_names)
            self.entity_names.append(name)
            self.entity_index[name] = idx
        return idx

    def relation(self, name: str) -> int:
        idx = self.relation_index.get(name)
        if idx is None:
            if self.frozen:
                raise VocabularyError(f"unknown relation {name!r}")
            idx = len(self.relation_names)
            self.relation_names.append(name)
            self.relation_index[name] = idx
        return idx

    def copy(self, frozen: bool | None = None) -> "Vocabulary":
        return Vocabulary(list(self.entity_names), list(self.relation_names),
                          self.frozen if frozen is None else frozen)

    def augmented_relation_name(self, r: int) -> str:
        R = self.num_relations
        if r < R:
            return self.relation_names[r]
        if r < 2 * R:
            return self.relation_names[r - R] + "_inv"
        if r == 2 * R:
            return "identity"
        raise IndexError(r)


def load_triples(path, vocab: Vocabulary | None = None, relations_frozen: bool = False):
    """Parse a head<TAB>relation<TAB>tail file.

    Returns (triples as an (N, 3) int array in the base relation space, vocab).
    The vocabulary is extended in first-seen order unless it is frozen.
    Duplicate triples are dropped, keeping the first occurrence.
    """
    if vocab is None:
        vocab = Vocabulary()
    rows = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise TripleParseError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail, got {line!r}")
            h, r, t = parts
            if relations_frozen and r not in vocab.relation_index:
                raise VocabularyError(f"{path}:{lineno}: unknown relation {r!r}")
            try:
                key = (vocab.entity(h), vocab.relation(r), vocab.entity(t))
            except VocabularyError as err:
                raise VocabularyError(f"{path}:{lineno}: {err.args[0]}") from None
            if key not in seen:
                seen.add(key)
                rows.append(key)
    arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return arr, vocab


def index_triples(named, vocab: Vocabulary | None = None):
    """In-memory twin of load_triples for (head, relation, tail) name tuples."""
    if vocab is None:
        vocab = Vocabulary()
    rows, seen = [], set()
    for h, r, t in named:
        key = (vocab.entity(h), vocab.relation(r), vocab.entity(t))
        if key not in seen:
            seen.add(key)
            rows.append(key)
    return np.array(rows, dtype=np.int64).reshape(-1, 3), vocab


def save_triples(path, triples, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in np.asarray(triples).reshape(-1, 3):
            fh.write(f"{vocab.entity_names[h]}\t{vocab.relation_names[r]}\t{vocab.entity_names[t]}\n")


class KnowledgeGraph:
    """Augmented triple store with CSR adjacency by head.

    Relation ids: ``r`` for base relations, ``r + R`` for their inverses and
    ``2R`` for the identity relation, where R is the base relation count.
    Triples are kept sorted by (head, relation, tail).
    """

    def __init__(self, vocab: Vocabulary, base_relation_count: int, triples: np.ndarray):
        self.vocab = vocab
        self.base_relation_count = base_relation_count
        V = vocab.num_entities
        order = np.lexsort((triples[:, 2], triples[:, 1], triples[:, 0]))
        self.triples = np.ascontiguousarray(triples[order])
        self.triples.setflags(write=False)
        counts = np.bincount(self.triples[:, 0], minlength=V)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self._keys = self.triple_keys(self.triples)

    @property
    def num_entities(self) -> int:
        return self.vocab.num_entities

    @property
    def num_relations(self) -> int:
        return 2 * self.base_relation_count + 1

    @property
    def identity_relation(self) -> int:
        return 2 * self.base_relation_count

    def __len__(self):
        return len(self.triples)

    def inverse_relation(self, r):
        R = self.base_relation_count
        r = np.asarray(r)
        out = np.where(r < R, r + R, r - R)
        return np.where(r == 2 * R, r, out)

    def adjacency(self, entity: int) -> np.ndarray:
        return self.triples[self.indptr[entity]:self.indptr[entity + 1]]

    def adjacency_by_head(self, entity: int) -> list:
        return [Triple(*map(int, t)) for t in self.adjacency(entity)]

    def triple_keys(self, triples) -> np.ndarray:
        V, Rr = self.num_entities, self.num_relations
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return (triples[:, 0] * Rr + triples[:, 1]) * V + triples[:, 2]

    def edge_ids(self, triples) -> np.ndarray:
        """Positions of the given triples in ``self.triples`` (-1 when absent)."""
        keys = self.triple_keys(triples)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1) if len(self._keys) else pos
        found = (len(self._keys) > 0) & (self._keys[pos] == keys) if len(keys) else np.zeros(0, bool)
        return np.where(found, pos, -1)

    def contains(self, h, r, t) -> bool:
        return bool(self.edge_ids([[h, r, t]])[0] >= 0)

    def base_triples(self) -> np.ndarray:
        return self.triples[self.triples[:, 1] < self.base_relation_count]

    def __eq__(self, other):
        return (isinstance(other, KnowledgeGraph)
                and self.vocab.entity_names == other.vocab.entity_names
                and self.vocab.relation_names == other.vocab.relation_names
                and self.base_relation_count == other.base_relation_count
                and np.array_equal(self.triples, other.triples)
                and np.array_equal(self.indptr, other.indptr))


def augment(base_triples, vocab: Vocabulary) -> KnowledgeGraph:
    """Add inverse triples (o, r+R, s) and one identity triple (e, 2R, e) per entity."""
    base = np.asarray(base_triples, dtype=np.int64).reshape(-1, 3)
    R = vocab.num_relations
    V = vocab.num_entities
    if len(base) and (base[:, 1].max() >= R or base[:, [0, 2]].max() >= V or base.min() < 0):
        raise IndexError("base triple index out of range")
    inverse = base[:, [2, 1, 0]].copy()
    inverse[:, 1] += R
    ents = np.arange(V, dtype=np.int64)
    ident = np.stack([ents, np.full(V, 2 * R), ents], axis=1)
    return KnowledgeGraph(vocab, R, np.concatenate([base, inverse, ident]))


@dataclass
class Frontier:
    entities: np.ndarray  # sorted entity ids reached so far
    edges: np.ndarray  # (E, 3) triples active at this layer, sorted by (h, r, t)


def initial_frontier(source: int) -> Frontier:
    return Frontier(np.array([source], dtype=np.int64), np.zeros((0, 3), dtype=np.int64))


def _csr_edge_ids(kg: KnowledgeGraph, heads: np.ndarray):
    """Edge ids of all triples whose head is in ``heads`` (order preserved) and the
    position in ``heads`` each one came from."""
    starts = kg.indptr[heads]
    counts = kg.indptr[heads + 1] - starts
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(heads)), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return starts[owner] + offsets, owner


def expand_frontier(kg: KnowledgeGraph, prev: Frontier) -> Frontier:
    if len(prev.entities) == 0:
        raise ValueError("cannot expand an empty frontier")
    eids, _ = _csr_edge_ids(kg, prev.entities)
    edges = kg.triples[eids]
    entities = np.union1d(prev.entities, edges[:, 2])
    return Frontier(entities, edges)


def hop_distances(kg: KnowledgeGraph, source: int) -> np.ndarray:
    """BFS distances over augmented edges; unreachable entities get UNREACHABLE."""
    dist = np.full(kg.num_entities, UNREACHABLE, dtype=np.int64)
    dist[source] = 0
    frontier = np.array([source], dtype=np.int64)
    d = 0
    while len(frontier):
        d += 1
        eids, _ = _csr_edge_ids(kg, frontier)
        tails = np.unique(kg.triples[eids, 2])
        new = tails[dist[tails] == UNREACHABLE]
        dist[new] = d
        frontier = new
    return dist


def filter_mask(query, target: int, all_true) -> set:
    """Entities other than ``target`` known to answer ``query`` = (head, relation)."""
    head, relation = query
    answers = all_true.get((head, relation), ()) if isinstance(all_true, dict) else \
        {t for (h, r, t) in all_true if h == head and r == relation}
    return {o for o in answers if o != target}


def answers_index(triples) -> dict:
    """(head, relation) -> set of tails."""
    out = defaultdict(set)
    for h, r, t in np.asarray(triples).reshape(-1, 3).tolist():
        out[(h, r)].add(t)
    return dict(out)


def with_inverses(triples, base_relation_count: int) -> np.ndarray:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    inv = triples[:, [2, 1, 0]].copy()
    inv[:, 1] += base_relation_count
    return np.concatenate([triples, inv])


@dataclass
class DatasetSplit:
    """Message-passing graph plus query triples (base relation space) for each split.

    For inductive data ``test_graph`` differs from ``fact_graph``: it holds the
    test-time facts over a disjoint entity vocabulary with shared relations.
    """

    fact_graph: KnowledgeGraph
    train_queries: np.ndarray
    valid_queries: np.ndarray
    test_queries: np.ndarray
    test_graph: KnowledgeGraph | None = None
    name: str = ""

    def __post_init__(self):
        R = self.fact_graph.base_relation_count
        train_side = [self.train_queries, self.valid_queries]
        if self.test_graph is None:
            train_side.append(self.test_queries)
            self._all_true = answers_index(with_inverses(np.concatenate(
                [self.fact_graph.base_triples()] + train_side), R))
            self._test_true = self._all_true
        else:
            self._all_true = answers_index(with_inverses(np.concatenate(
                [self.fact_graph.base_triples()] + train_side), R))
            self._test_true = answers_index(with_inverses(np.concatenate(
                [self.test_graph.base_triples(), self.test_queries]), R))

    @property
    def inductive(self) -> bool:
        return self.test_graph is not None

    @property
    def vocab(self) -> Vocabulary:
        return self.fact_graph.vocab

    def graph_for(self, which: str) -> KnowledgeGraph:
        if which == "test" and self.test_graph is not None:
            return self.test_graph
        return self.fact_graph

    def all_true(self, which: str = "test") -> dict:
        return self._test_true if which == "test" else self._all_true

    def queries(self, which: str) -> np.ndarray:
        return {"train": self.train_queries, "valid": self.valid_queries,
                "test": self.test_queries}[which]

    def summary(self) -> dict:
        out = {
            "entities": self.fact_graph.num_entities,
            "relations": self.fact_graph.base_relation_count,
            "facts": int(len(self.fact_graph.base_triples())),
            "train": int(len(self.train_queries)),
            "valid": int(len(self.valid_queries)),
            "test": int(len(self.test_queries)),
        }
        if self.test_graph is not None:
            out["test_entities"] = self.test_graph.num_entities
            out["test_facts"] = int(len(self.test_graph.base_triples()))
        return out


SPLIT_FILES = ("train.txt", "valid.txt", "test.txt")


def load_dataset(directory, inductive_dir=None, name: str | None = None) -> DatasetSplit:
    """Load train/valid/test files from ``directory``.

    Transductive: train triples form the fact graph and the training queries.
    Inductive: pass ``inductive_dir`` holding the test-time facts (train.txt)
    and prediction triples (test.txt); its entities get a fresh vocabulary and
    relations must already be known.
    """
    directory = os.fspath(directory)
    for fname in SPLIT_FILES:
        path = os.path.join(directory, fname)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing split file: {path}")
    vocab = Vocabulary()
    train, vocab = load_triples(os.path.join(directory, "train.txt"), vocab)
    valid, vocab = load_triples(os.path.join(directory, "valid.txt"), vocab)
    if inductive_dir is None:
        test, vocab = load_triples(os.path.join(directory, "test.txt"), vocab)
        kg = augment(train, vocab)
        return DatasetSplit(kg, train, valid, test, name=name or os.path.basename(directory.rstrip("/")))

    # inductive: validation stays on the training graph
    kg = augment(train, vocab)
    ind = os.fspath(inductive_dir)
    for fname in ("train.txt", "test.txt"):
        if not os.path.exists(os.path.join(ind, fname)):
            raise FileNotFoundError(f"missing split file: {os.path.join(ind, fname)}")
    test_vocab = Vocabulary([], list(vocab.relation_names))
    facts, test_vocab = load_triples(os.path.join(ind, "train.txt"), test_vocab, relations_frozen=True)
    test_vocab.frozen = True
    test, test_vocab = load_triples(os.path.join(ind, "test.txt"), test_vocab, relations_frozen=True)
    test_kg = augment(facts, test_vocab)
    return DatasetSplit(kg, train, valid, test, test_graph=test_kg,
                        name=name or os.path.basename(directory.rstrip("/")))


def split_from_named(train, valid, test, name: str = "") -> DatasetSplit:
    """Transductive split from name triples, indexed exactly as load_dataset would."""
    vocab = Vocabulary()
    tr, vocab = index_triples(train, vocab)
    va, vocab = index_triples(valid, vocab)
    te, vocab = index_triples(test, vocab)
    return DatasetSplit(augment(tr, vocab), tr, va, te, name=name)


def save_dataset(split: DatasetSplit, directory, inductive_dir=None) -> None:
    """Write the split back in file order, so that reloading reproduces every index."""
    os.makedirs(directory, exist_ok=True)
    vocab = split.vocab
    save_triples(os.path.join(directory, "train.txt"), split.train_queries, vocab)
    save_triples(os.path.join(directory, "valid.txt"), split.valid_queries, vocab)
    if split.test_graph is None:
        save_triples(os.path.join(directory, "test.txt"), split.test_queries, vocab)
        return
    # inductive: the training directory still needs a test.txt placeholder
    open(os.path.join(directory, "test.txt"), "w").close()
    inductive_dir = inductive_dir or os.fspath(directory).rstrip("/") + "_ind"
    os.makedirs(inductive_dir, exist_ok=True)
    tv = split.test_graph.vocab
    save_triples(os.path.join(inductive_dir, "train.txt"), split.test_graph.base_triples(), tv)
    save_triples(os.path.join(inductive_dir, "test.txt"), split.test_queries, tv)
