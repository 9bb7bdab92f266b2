import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipeqpp.domain import (COST_FIELDS, DEFAULT_CATALOG, Catalog, ChunkTrace, CostVector,
                            OperatorInstance, ResourceUtilization, TraceMode, read_traces,
                            result_chunks, validate_trace, write_traces)
from tracekit import CHAIN, cost, make_trace


def test_well_formed_two_chunk_trace_is_valid():
    t = make_trace(CHAIN, [[0, 1, 2], [0, 1, 2]])
    assert validate_trace(t) == []


def test_unknown_operator_id_is_named():
    t = make_trace(CHAIN, [[0, 1, 2]])
    bad = dataclasses.replace(t, chunks=(ChunkTrace(0, (0, 7, 2), t.chunks[0].record_addr),))
    problems = validate_trace(bad)
    assert len(problems) == 1
    assert "7" in problems[0] and "chunk 0" in problems[0]


def test_misaligned_addresses_give_one_violation():
    t = make_trace(CHAIN, [[0, 1, 2]])
    c = t.chunks[0]
    bad = dataclasses.replace(t, chunks=(ChunkTrace(0, c.transform_addr, c.record_addr[:2]),))
    problems = validate_trace(bad)
    assert len(problems) == 1
    assert "record_addr" in problems[0]


def test_immediate_duplicate_and_empty_path():
    t = make_trace(CHAIN, [[0, 1, 2]])
    rids = t.chunks[0].record_addr
    dup = dataclasses.replace(t, chunks=(ChunkTrace(0, (0, 1, 1), rids),))
    assert any("consecutively" in p for p in validate_trace(dup))
    empty = dataclasses.replace(t, chunks=(ChunkTrace(0, (), ()),))
    assert any("empty" in p for p in validate_trace(empty))


def test_cost_invariants_are_reported():
    t = make_trace(CHAIN, [[0, 1, 2]], costs={(1, 0): cost(1e-3, cache_misses=99)})
    assert any("cache_misses" in p for p in validate_trace(t))
    assert CostVector(mem_avg=3, mem_max=2).violations() == ["mem_avg > mem_max"]
    assert CostVector(elapsed_time=-1).violations() == ["elapsed_time < 0"]


def test_probe_budget_is_enforced():
    t = make_trace(CHAIN, [[0, 1, 2]] * 3, mode=TraceMode.PROBE, probe_budget=2)
    assert any("budget" in p for p in validate_trace(t))
    assert validate_trace(dataclasses.replace(t, probe_budget=3)) == []


def test_nonpositive_latency_is_reported():
    t = make_trace(CHAIN, [[0, 1, 2]], latency=0.0)
    assert any("total_latency" in p for p in validate_trace(t))


def test_result_chunks_skip_early_terminated():
    t = make_trace(CHAIN, [[0, 1, 2], [0, 1], [0, 1, 2]])
    assert [c.chunk_id for c in result_chunks(t)] == [0, 2]


def test_catalog_order_is_stable():
    names = DEFAULT_CATALOG.names
    assert names[0] == "Scan" and names[-1] == "Sink" and len(names) == 11
    again = Catalog.from_dict(DEFAULT_CATALOG.to_dict())
    assert again.names == names
    assert [again.index(n) for n in names] == list(range(11))
    with pytest.raises(KeyError):
        DEFAULT_CATALOG.index("Teleport")


def test_domain_constructor_checks():
    with pytest.raises(ValueError):
        ResourceUtilization(1.5, 0, 0)
    with pytest.raises(ValueError):
        OperatorInstance(0, "Scan", {}, -1.0, 1)
    with pytest.raises(ValueError):
        OperatorInstance(0, "Scan", {}, 1.0, 0)


def test_cost_vector_array_round_trip():
    c = cost(0.5)
    assert CostVector.from_array(c.to_array()) == c
    assert c.to_array().shape == (len(COST_FIELDS),)


# -------------------------------------------------------------- serialization

_counts = st.integers(0, 10**9)
_seconds = st.floats(0, 100, allow_nan=False, allow_infinity=False)


@st.composite
def traces(draw):
    n_ops = draw(st.integers(1, 5))
    types = {i: draw(st.sampled_from(DEFAULT_CATALOG.names)) for i in range(n_ops)}
    n_chunks = draw(st.integers(1, 4))
    paths = []
    for _ in range(n_chunks):
        length = draw(st.integers(1, n_ops))
        paths.append(list(range(n_ops - length, n_ops)))
    costs = {}
    for cid, p in enumerate(paths):
        for op in p:
            refs = draw(_counts)
            mx = draw(_counts)
            costs[(op, cid)] = CostVector(draw(_seconds), draw(_seconds), draw(_counts),
                                          draw(_counts), refs, draw(st.integers(0, refs)),
                                          draw(st.integers(0, mx)), mx, draw(_counts),
                                          draw(_counts))
    mode = draw(st.sampled_from(list(TraceMode)))
    latency = draw(st.one_of(st.none(), st.floats(1e-6, 1e3)))
    return make_trace(types, paths, costs, query_id=draw(st.text(min_size=1, max_size=8)),
                      mode=mode, latency=latency)


@settings(max_examples=60, deadline=None)
@given(traces())
def test_jsonl_round_trip(tmp_path_factory, trace):
    path = tmp_path_factory.mktemp("rt") / "t.jsonl"
    write_traces(path, [trace, trace])
    back = read_traces(path)
    assert back == [trace, trace]


def test_counts_serialize_as_integers(tmp_path):
    t = make_trace(CHAIN, [[0, 1, 2]])
    write_traces(tmp_path / "t.jsonl", [t])
    text = (tmp_path / "t.jsonl").read_text()
    assert '"cpu_cycles":100,' in text
    assert '"elapsed_time":0.001' in text
    assert np.isclose(read_traces(tmp_path / "t.jsonl")[0].operators[0].records[0]
                      .cost.elapsed_time, 1e-3)
