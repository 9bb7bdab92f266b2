import dataclasses
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipeqpp.dataflow import (DataflowError, attach_costs, build_dataflow_tree, orient_paths,
                              to_adjacency, tree_from_trace)
from pipeqpp.domain import ChunkTrace
from tracekit import CHAIN, cost, make_trace


def naive_trie(paths):
    """Plain dict-of-dicts insertion; dicts keep insertion order."""
    root = {"op": paths[0][0], "count": 0, "kids": {}}
    for p in paths:
        node = root
        node["count"] += 1
        for op in p[1:]:
            node = node["kids"].setdefault(op, {"op": op, "count": 0, "kids": {}})
            node["count"] += 1
    return root


def canon_naive(node):
    return (node["op"], node["count"], tuple(canon_naive(k) for k in node["kids"].values()))


def canon_tree(node):
    return (node.operator_id, node.multiplicity, tuple(canon_tree(c) for c in node.children))


def random_path_set(rng):
    alphabet = rng.randint(1, 8)
    n = rng.randint(1, 50)
    return [[0] + [rng.randrange(alphabet) + 1 for _ in range(rng.randint(0, 11))]
            for _ in range(n)]


path_sets = st.integers(1, 8).flatmap(lambda a: st.lists(
    st.lists(st.integers(1, a), max_size=11).map(lambda p: [0] + p), min_size=1, max_size=50))


@settings(max_examples=300, deadline=None)
@given(path_sets)
def test_trie_matches_naive_insertion(paths):
    tree = build_dataflow_tree(paths)
    assert canon_tree(tree.root) == canon_naive(naive_trie(paths))


@settings(max_examples=200, deadline=None)
@given(path_sets)
def test_tree_invariants(paths):
    tree = build_dataflow_tree(paths)
    assert tree.N == len(list(tree.root.walk()))
    assert tree.root.multiplicity == len(paths)
    for node in tree.nodes:
        assert node.multiplicity >= 1
        ids = [c.operator_id for c in node.children]
        assert len(ids) == len(set(ids))
        # a node is reached by at least as many paths as its children together
        # (more when some paths end at it)
        assert node.multiplicity >= sum(c.multiplicity for c in node.children)
    # each path ends at exactly one node
    ended_here = sum(n.multiplicity - sum(c.multiplicity for c in n.children) for n in tree.nodes)
    assert ended_here == len(paths)
    # every distinct prefix is exactly one node
    prefixes = {tuple(p[:k]) for p in paths for k in range(1, len(p) + 1)}
    assert tree.N == len(prefixes)


@settings(max_examples=100, deadline=None)
@given(path_sets, st.randoms(use_true_random=False))
def test_node_set_is_order_independent_and_build_is_idempotent(paths, rnd):
    shuffled = list(paths)
    rnd.shuffle(shuffled)
    a, b = build_dataflow_tree(paths), build_dataflow_tree(shuffled)

    def as_set(tree):
        out = set()

        def rec(node, prefix):
            prefix = prefix + (node.operator_id,)
            out.add((prefix, node.multiplicity))
            for c in node.children:
                rec(c, prefix)
        rec(tree.root, ())
        return out

    assert as_set(a) == as_set(b)
    again = build_dataflow_tree(a.leaf_paths())
    assert {tuple(p) for p in again.leaf_paths()} == {tuple(p) for p in a.leaf_paths()}
    assert canon_tree(build_dataflow_tree(paths).root) == canon_tree(a.root)


def test_thousand_random_path_sets_match_the_oracle():
    rng = random.Random(2024)
    for _ in range(1000):
        paths = random_path_set(rng)
        assert canon_tree(build_dataflow_tree(paths).root) == canon_naive(naive_trie(paths))


def test_single_path_is_a_chain():
    tree = build_dataflow_tree([["A", "B", "C"]])
    assert [n.operator_id for n in tree.nodes] == ["A", "B", "C"]
    assert [n.multiplicity for n in tree.nodes] == [1, 1, 1]


def test_repeated_path_counts_multiplicity():
    tree = build_dataflow_tree([["A", "B", "C"], ["A", "B", "C"]])
    assert tree.N == 3
    assert [n.multiplicity for n in tree.nodes] == [2, 2, 2]


def test_divergent_paths_branch_at_the_root():
    tree = build_dataflow_tree([["A", "B", "C"], ["A", "B2", "C2"]])
    assert [n.operator_id for n in tree.nodes] == ["A", "B", "B2", "C", "C2"]
    assert [c.operator_id for c in tree.root.children] == ["B", "B2"]
    assert tree.parent_index() == [-1, 0, 0, 1, 2]
    assert tree.depths() == [0, 1, 1, 2, 2]


@pytest.mark.parametrize("paths", [[], [[]], [["A", "B"], ["X", "B"]]])
def test_bad_path_sets_rejected(paths):
    with pytest.raises(DataflowError):
        build_dataflow_tree(paths)


def test_orient_reverses_to_sink_first():
    t = make_trace(CHAIN, [[0, 1, 2], [0, 1, 2]])
    assert orient_paths(t) == [[2, 1, 0], [2, 1, 0]]


def test_orient_rejects_two_sinks():
    types = {0: "Scan", 1: "Sink", 2: "Scan", 3: "Sink"}
    t = make_trace(types, [[0, 1], [2, 3]])
    with pytest.raises(DataflowError):
        orient_paths(t)


def test_orient_skips_chunks_that_never_reached_the_sink():
    t = make_trace(CHAIN, [[0, 1, 2], [0, 1]])
    assert orient_paths(t) == [[2, 1, 0]]
    only_dropped = make_trace(CHAIN, [[0, 1]])
    with pytest.raises(DataflowError):
        orient_paths(only_dropped)


def test_tree_from_trace_ignores_chunk_listing_order():
    types = {0: "Scan", 1: "Filter", 2: "HashJoin", 3: "MergeSort", 4: "MergeJoin", 5: "Sink"}
    t = make_trace(types, [[0, 1, 2, 5], [0, 1, 3, 4, 5], [0, 1, 2, 5]])
    flipped = dataclasses.replace(t, chunks=tuple(reversed(t.chunks)))
    a, b = tree_from_trace(t), tree_from_trace(flipped)
    assert canon_tree(a.root) == canon_tree(b.root)
    assert [n.record_ids for n in a.nodes] == [n.record_ids for n in b.nodes]
    assert len(a.path_shapes()) == 2


def test_adjacency_examples():
    chain3 = build_dataflow_tree([[0, 1, 2]])
    m = to_adjacency(chain3)
    assert m.sum() == 2 and m[0, 1] == 1 and m[1, 2] == 1
    fork = build_dataflow_tree([[0, 1], [0, 2]])
    m = to_adjacency(fork)
    assert m.sum() == 2 and m[0, 1] == 1 and m[0, 2] == 1


@settings(max_examples=100, deadline=None)
@given(path_sets)
def test_adjacency_has_n_minus_one_edges(paths):
    tree = build_dataflow_tree(paths)
    m = to_adjacency(tree)
    assert m.shape == (tree.N, tree.N)
    assert m.sum() == tree.N - 1
    assert np.all(np.tril(m) == 0)  # breadth-first order puts parents first


def test_attach_costs_takes_the_mean_over_chunks():
    c1, c2 = cost(1e-3, mem_avg=10, mem_max=30), cost(3e-3, mem_avg=30, mem_max=50)
    t = make_trace(CHAIN, [[0, 1, 2], [0, 1, 2]], costs={(1, 0): c1, (1, 1): c2})
    tree = attach_costs(tree_from_trace(t), t)
    filt = next(n for n in tree.nodes if n.operator_id == 1)
    assert filt.cost.elapsed_time == pytest.approx(2e-3)
    assert filt.cost.mem_avg == pytest.approx(20)
    assert filt.multiplicity == 2
    single = make_trace(CHAIN, [[0, 1, 2]], costs={(1, 0): c1})
    node = next(n for n in attach_costs(tree_from_trace(single), single).nodes
                if n.operator_id == 1)
    assert node.cost == c1


def test_attach_costs_override_and_missing_records():
    t = make_trace(CHAIN, [[0, 1, 2]])
    override = {(2, 0): cost(9.0)}
    tree = attach_costs(tree_from_trace(t), t, override)
    assert tree.nodes[0].cost.elapsed_time == 9.0
    broken = dataclasses.replace(t, chunks=(ChunkTrace(0, (0, 1, 2), (0, 1, 99)),))
    tree = build_dataflow_tree([[2, 1, 0]], record_paths=[[99, 1, 0]])
    with pytest.raises(DataflowError):
        attach_costs(tree, broken)


def test_dot_export_lists_every_edge():
    tree = build_dataflow_tree([[0, 1], [0, 2]])
    dot = tree.to_dot()
    assert dot.count("->") == 2 and dot.startswith("digraph")
