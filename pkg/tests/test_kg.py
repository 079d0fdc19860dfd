import os

import numpy as np
import pytest
from conftest import UMLS_DIR, graph_from_names, random_graph
from hypothesis import given, settings
from hypothesis import strategies as st

from rungnn.kg import (
    UNREACHABLE,
    TripleParseError,
    Vocabulary,
    VocabularyError,
    augment,
    expand_frontier,
    filter_mask,
    hop_distances,
    initial_frontier,
    load_dataset,
    load_triples,
    save_dataset,
    save_triples,
)


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


# ---------------------------------------------------------------- loading


def test_load_two_lines(tmp_path):
    arr, vocab = load_triples(write(tmp_path / "t.txt", ["a\tr\tb", "b\tr\tc"]))
    assert arr.shape == (2, 3)
    assert vocab.num_entities == 3 and vocab.num_relations == 1
    assert vocab.entity_names == ["a", "b", "c"]


def test_load_empty_keeps_vocab(tmp_path):
    vocab = Vocabulary(["x"], ["r"])
    arr, out = load_triples(write(tmp_path / "t.txt", []), vocab)
    assert arr.shape == (0, 3)
    assert out.entity_names == ["x"] and out.relation_names == ["r"]


def test_comments_and_reparse_identical(tmp_path):
    p = write(tmp_path / "t.txt", ["# header", "a\tr\tb", "", "c\ts\ta"])
    a1, v1 = load_triples(p)
    a2, v2 = load_triples(p, v1)
    np.testing.assert_array_equal(a1, a2)
    assert v2.entity_names == ["a", "b", "c"]


def test_duplicates_dropped(tmp_path):
    arr, _ = load_triples(write(tmp_path / "t.txt", ["a\tr\tb", "a\tr\tb"]))
    assert len(arr) == 1


def test_malformed_line_reports_line_number(tmp_path):
    p = write(tmp_path / "t.txt", ["a\tr\tb", "a r b"])
    with pytest.raises(TripleParseError, match=":2:"):
        load_triples(p)


def test_frozen_vocab_rejects_unknown(tmp_path):
    vocab = Vocabulary(["a", "b"], ["r"], frozen=True)
    with pytest.raises(VocabularyError):
        load_triples(write(tmp_path / "t.txt", ["a\tr\tz"]), vocab)


# ---------------------------------------------------------------- augmentation


def test_augment_counts():
    kg, _ = graph_from_names([("a", "r", "b"), ("b", "r", "c")])
    assert len(kg) == 7 and kg.num_relations == 3 and kg.identity_relation == 2


def test_augment_single_entity():
    kg = augment(np.zeros((0, 3), dtype=np.int64), Vocabulary(["a"], []))
    assert len(kg) == 1
    assert kg.triples.tolist() == [[0, 0, 0]]


def test_augment_structure_and_involution():
    rng = np.random.default_rng(0)
    kg = random_graph(rng, 20, 3, 40)
    R = kg.base_relation_count
    base = kg.base_triples()
    for h, r, t in base:
        assert kg.contains(t, r + R, h)
    for e in range(kg.num_entities):
        assert kg.contains(e, 2 * R, e)
    inv = kg.triples[(kg.triples[:, 1] >= R) & (kg.triples[:, 1] < 2 * R)]
    back = inv[:, [2, 1, 0]].copy()
    back[:, 1] -= R
    assert sorted(map(tuple, back.tolist())) == sorted(map(tuple, base.tolist()))
    assert len(kg) == 2 * len(base) + kg.num_entities


def test_adjacency_by_head_exact():
    rng = np.random.default_rng(1)
    kg = random_graph(rng, 15, 2, 30)
    for e in range(kg.num_entities):
        expected = sorted(map(tuple, kg.triples[kg.triples[:, 0] == e].tolist()))
        assert sorted(kg.adjacency_by_head(e)) == expected


def test_augment_rejects_out_of_range():
    with pytest.raises(IndexError):
        augment(np.array([[0, 1, 0]]), Vocabulary(["a"], ["r"]))


# ---------------------------------------------------------------- frontiers


def test_chain_one_hop():
    kg, v = graph_from_names([("e0", "r", "e1"), ("e1", "r", "e2")])
    fr = expand_frontier(kg, initial_frontier(v.entity_index["e0"]))
    edges = set(map(tuple, fr.edges.tolist()))
    assert {(0, 0, 1), (0, kg.identity_relation, 0)} <= edges
    assert fr.entities.tolist() == [0, 1]


def test_isolated_start_keeps_identity():
    kg, v = graph_from_names([("a", "r", "b")])
    kg = augment(kg.base_triples(), Vocabulary(["a", "b", "lone"], ["r"]))
    fr = expand_frontier(kg, initial_frontier(2))
    assert fr.edges.tolist() == [[2, kg.identity_relation, 2]]
    assert fr.entities.tolist() == [2]


def test_in_law_graph_reach(in_law_graph):
    kg, v = in_law_graph
    andrew, mia = v.entity_index["Andrew"], v.entity_index["Mia"]
    fr = initial_frontier(andrew)
    reached_at = None
    for i in range(1, 4):
        fr = expand_frontier(kg, fr)
        if reached_at is None and mia in fr.entities:
            reached_at = i
    assert reached_at == 2
    # the edge that delivers Mia at hop 2 leaves Liam along r1, after Andrew -r2-> Liam
    dist = hop_distances(kg, andrew)
    assert dist[mia] == 2 and dist[v.entity_index["Liam"]] == 1
    assert kg.contains(v.entity_index["Liam"], v.relation_index["r1"], mia)


def test_frontier_edges_sorted():
    rng = np.random.default_rng(2)
    kg = random_graph(rng, 30, 3, 60)
    fr = expand_frontier(kg, expand_frontier(kg, initial_frontier(0)))
    keys = [tuple(t) for t in fr.edges.tolist()]
    assert keys == sorted(keys)


def test_expand_empty_raises():
    kg, _ = graph_from_names([("a", "r", "b")])
    from rungnn.kg import Frontier
    with pytest.raises(ValueError):
        expand_frontier(kg, Frontier(np.zeros(0, np.int64), np.zeros((0, 3), np.int64)))


def test_hop_distances_basic():
    kg, v = graph_from_names([("e0", "r", "e1"), ("e1", "r", "e2")])
    assert hop_distances(kg, 0).tolist() == [0, 1, 2]
    kg2 = augment(kg.base_triples(), Vocabulary(["e0", "e1", "e2", "far"], ["r"]))
    assert hop_distances(kg2, 0)[3] == UNREACHABLE


@settings(max_examples=120)
@given(st.integers(0, 10_000), st.integers(2, 25), st.integers(0, 50))
def test_frontier_monotone_and_bfs(seed, V, E):
    rng = np.random.default_rng(seed)
    kg = random_graph(rng, V, 2, E)
    src = int(rng.integers(V))
    dist = hop_distances(kg, src)
    fr = initial_frontier(src)
    prev_edges = set()
    for i in range(1, 6):
        new = expand_frontier(kg, fr)
        assert set(fr.entities.tolist()) <= set(new.entities.tolist())
        edges = set(map(tuple, new.edges.tolist()))
        assert prev_edges <= edges
        assert all(h in set(fr.entities.tolist()) for h, _, _ in edges)
        assert set(new.entities.tolist()) == set(np.flatnonzero(dist <= i).tolist())
        fr, prev_edges = new, edges


# ---------------------------------------------------------------- filtering


def test_filter_mask_examples():
    assert filter_mask((0, 0), 1, {(0, 0): {1}}) == set()
    assert filter_mask((0, 0), 1, {(0, 0): {1, 2}}) == {2}
    assert filter_mask((0, 0), 1, [(0, 0, 1), (0, 0, 2), (0, 1, 3)]) == {2}


@pytest.mark.skipif(not os.path.isdir(UMLS_DIR), reason="UMLS files not present")
def test_umls_masks_exclude_target(umls):
    true = umls.all_true("test")
    R = umls.fact_graph.base_relation_count
    for h, r, t in umls.test_queries.tolist():
        assert t not in filter_mask((h, r), t, true)
        assert h not in filter_mask((t, r + R), h, true)


@pytest.mark.skipif(not os.path.isdir(UMLS_DIR), reason="UMLS files not present")
def test_umls_statistics(umls):
    s = umls.summary()
    assert (s["entities"], s["relations"], s["train"], s["valid"], s["test"]) == (135, 46, 5216, 652, 661)
    assert umls.fact_graph.num_relations == 93


# ---------------------------------------------------------------- splits


def test_round_trip(tmp_path):
    d = tmp_path / "ds"
    d.mkdir()
    write(d / "train.txt", ["a\tr\tb", "b\ts\tc", "c\tr\ta"])
    write(d / "valid.txt", ["a\ts\tc"])
    write(d / "test.txt", ["b\tr\td"])
    s1 = load_dataset(d)
    save_dataset(s1, tmp_path / "copy")
    s2 = load_dataset(tmp_path / "copy")
    assert s1.fact_graph == s2.fact_graph
    assert s1.vocab.entity_names == s2.vocab.entity_names
    np.testing.assert_array_equal(s1.test_queries, s2.test_queries)
    for e in range(s1.fact_graph.num_entities):
        assert s1.fact_graph.adjacency_by_head(e) == s2.fact_graph.adjacency_by_head(e)


def test_missing_split_file(tmp_path):
    write(tmp_path / "train.txt", ["a\tr\tb"])
    write(tmp_path / "valid.txt", [])
    with pytest.raises(FileNotFoundError, match="test.txt"):
        load_dataset(tmp_path)


def test_inductive_vocabularies(tmp_path):
    d, ind = tmp_path / "d", tmp_path / "d_ind"
    d.mkdir()
    ind.mkdir()
    write(d / "train.txt", ["a\tr\tb", "b\ts\tc"])
    write(d / "valid.txt", ["a\ts\tc"])
    write(d / "test.txt", [])
    write(ind / "train.txt", ["x\tr\ty", "y\ts\tz"])
    write(ind / "test.txt", ["x\ts\tz"])
    split = load_dataset(d, ind)
    assert split.inductive
    assert not set(split.test_graph.vocab.entity_names) & set(split.vocab.entity_names)
    assert split.test_graph.vocab.relation_names == split.vocab.relation_names
    write(ind / "test.txt", ["x\ts\tunknown"])
    with pytest.raises(VocabularyError):
        load_dataset(d, ind)
    write(ind / "test.txt", ["x\tnew_rel\tz"])
    with pytest.raises(VocabularyError):
        load_dataset(d, ind)


def test_save_triples_round_trip(tmp_path):
    vocab = Vocabulary(["a", "b"], ["r"])
    save_triples(tmp_path / "t.txt", np.array([[0, 0, 1]]), vocab)
    arr, _ = load_triples(tmp_path / "t.txt", vocab.copy())
    assert arr.tolist() == [[0, 0, 1]]
