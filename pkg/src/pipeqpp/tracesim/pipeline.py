"""Pipeline specs and runtime modification events."""
from __future__ import annotations

import dataclasses
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field

from ..domain import DEFAULT_CATALOG, Catalog, OperatorInstance

# operators that accept more than one concurrent chunk when dop > 1
PARALLELIZABLE = frozenset({"Scan", "Filter", "Expression", "HashJoin", "Aggregate",
                            "PartialSort"})


class SpecError(ValueError):
    pass


class Action(str, enum.Enum):
    REPLACE_JOIN_ALGO = "REPLACE_JOIN_ALGO"
    INSERT_OPERATORS = "INSERT_OPERATORS"


@dataclass(frozen=True)
class ModificationEvent:
    """A runtime rewrite of the pipeline.

    ``REPLACE_JOIN_ALGO``: ``affected_ids == (join,)``; ``inserted`` holds one
    sort per join input (in producer order) followed by the replacement join.
    ``INSERT_OPERATORS``: ``affected_ids == (producer, consumer)``; ``inserted``
    is the chain spliced into that edge.

    The event fires once the last affected operator has finished
    ``trigger_chunk`` chunks.
    """

    trigger_chunk: int
    action: Action
    affected_ids: tuple
    inserted: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "action", Action(self.action))
        object.__setattr__(self, "affected_ids", tuple(self.affected_ids))
        object.__setattr__(self, "inserted", tuple(self.inserted))
        if self.trigger_chunk < 1:
            raise SpecError("trigger_chunk must be >= 1")
        if not self.inserted:
            raise SpecError("modification inserts no operators")

    @property
    def watched_id(self) -> int:
        return self.affected_ids[-1]

    def to_dict(self):
        return {"trigger_chunk": self.trigger_chunk, "action": self.action.value,
                "affected_ids": list(self.affected_ids),
                "inserted": [i.to_dict() for i in self.inserted]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["trigger_chunk"], Action(d["action"]), tuple(d["affected_ids"]),
                   tuple(OperatorInstance.from_dict(i) for i in d["inserted"]))


@dataclass(frozen=True)
class PipelineSpec:
    query_id: str
    nodes: tuple
    edges: tuple
    dop: dict = field(default_factory=dict)
    modifications: tuple = ()
    template_id: int = 0
    seed: int = 0
    chunk_rows: int = 1024
    background_level: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        object.__setattr__(self, "dop", {int(k): int(v) for k, v in self.dop.items()})
        object.__setattr__(self, "modifications", tuple(self.modifications))

    @property
    def node_map(self):
        return {n.id: n for n in self.nodes}

    def producers(self):
        out = defaultdict(list)
        for p, c in self.edges:
            out[c].append(p)
        return out

    def consumers(self):
        out = defaultdict(list)
        for p, c in self.edges:
            out[p].append(c)
        return out

    @property
    def source_ids(self):
        prods = self.producers()
        return [n.id for n in self.nodes if not prods.get(n.id)]

    @property
    def sink_id(self):
        cons = self.consumers()
        sinks = [n.id for n in self.nodes if not cons.get(n.id)]
        if len(sinks) != 1:
            raise SpecError(f"pipeline must have exactly one sink, found {sinks}")
        return sinks[0]

    def dop_of(self, op_id) -> int:
        return self.dop.get(op_id, 1)

    def to_dict(self):
        return {
            "query_id": self.query_id, "template_id": self.template_id, "seed": self.seed,
            "chunk_rows": self.chunk_rows, "background_level": self.background_level,
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "dop": {str(k): v for k, v in sorted(self.dop.items())},
            "modifications": [m.to_dict() for m in self.modifications],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            query_id=d["query_id"], template_id=d.get("template_id", 0),
            seed=d.get("seed", 0), chunk_rows=d.get("chunk_rows", 1024),
            background_level=d.get("background_level", 0.0),
            nodes=tuple(OperatorInstance.from_dict(n) for n in d["nodes"]),
            edges=tuple(tuple(e) for e in d["edges"]),
            dop={int(k): v for k, v in d.get("dop", {}).items()},
            modifications=tuple(ModificationEvent.from_dict(m) for m in d.get("modifications", [])),
        )


def validate_spec(spec: PipelineSpec, catalog: Catalog = DEFAULT_CATALOG) -> None:
    """Raise :class:`SpecError` unless ``spec`` is a connected single-sink DAG."""
    if not spec.nodes:
        raise SpecError(f"{spec.query_id}: pipeline has no nodes")
    ids = [n.id for n in spec.nodes]
    if len(set(ids)) != len(ids):
        raise SpecError(f"{spec.query_id}: duplicate operator ids")
    idset = set(ids)
    for n in spec.nodes:
        if n.op_type not in catalog:
            raise SpecError(f"{spec.query_id}: unknown operator type {n.op_type!r}")
    for p, c in spec.edges:
        if p not in idset or c not in idset:
            raise SpecError(f"{spec.query_id}: edge ({p}, {c}) references unknown node")
        if p == c:
            raise SpecError(f"{spec.query_id}: self-loop on {p}")
    if len(set(spec.edges)) != len(spec.edges):
        raise SpecError(f"{spec.query_id}: duplicate edges")
    sink = spec.sink_id
    if not spec.source_ids:
        raise SpecError(f"{spec.query_id}: pipeline has no source")
    for op_id, k in spec.dop.items():
        if op_id not in idset or k < 1:
            raise SpecError(f"{spec.query_id}: bad dop entry {op_id}={k}")
    # acyclic + every node reaches the sink
    cons = spec.consumers()
    indeg = {i: 0 for i in ids}
    for _, c in spec.edges:
        indeg[c] += 1
    order = [i for i in ids if indeg[i] == 0]
    seen = 0
    while order:
        i = order.pop()
        seen += 1
        for c in cons.get(i, ()):
            indeg[c] -= 1
            if indeg[c] == 0:
                order.append(c)
    if seen != len(ids):
        raise SpecError(f"{spec.query_id}: pipeline contains a cycle")
    prods = spec.producers()
    reach, stack = {sink}, [sink]
    while stack:
        for p in prods.get(stack.pop(), ()):
            if p not in reach:
                reach.add(p)
                stack.append(p)
    if reach != idset:
        raise SpecError(f"{spec.query_id}: nodes {sorted(idset - reach)} do not reach the sink")
    for ev in spec.modifications:
        validate_modification(spec, ev, catalog)


def validate_modification(spec, ev: ModificationEvent, catalog=DEFAULT_CATALOG):
    nodes = spec.node_map
    for a in ev.affected_ids:
        if a not in nodes:
            raise SpecError(f"{spec.query_id}: modification affects unknown node {a}")
    clash = {i.id for i in ev.inserted} & set(nodes)
    if clash:
        raise SpecError(f"{spec.query_id}: inserted ids {sorted(clash)} already in use")
    if ev.action is Action.REPLACE_JOIN_ALGO:
        if len(ev.affected_ids) != 1:
            raise SpecError("REPLACE_JOIN_ALGO affects exactly one join")
        n_in = len(spec.producers().get(ev.affected_ids[0], ()))
        if len(ev.inserted) != n_in + 1:
            raise SpecError(f"REPLACE_JOIN_ALGO needs {n_in} sorts plus one join, "
                            f"got {len(ev.inserted)} operators")
    else:
        if len(ev.affected_ids) != 2 or tuple(ev.affected_ids) not in set(spec.edges):
            raise SpecError("INSERT_OPERATORS must name an existing (producer, consumer) edge")
    modified = apply_modification(spec, ev)
    # post-modification pipeline must itself be valid
    validate_spec(dataclasses.replace(modified, modifications=()), catalog)


def apply_modification(spec: PipelineSpec, ev: ModificationEvent) -> PipelineSpec:
    """The pipeline as it looks after ``ev`` fires (old chunks aside)."""
    edges = list(spec.edges)
    nodes = list(spec.nodes)
    dop = dict(spec.dop)
    new_ids = [i.id for i in ev.inserted]
    if ev.action is Action.REPLACE_JOIN_ALGO:
        join = ev.affected_ids[0]
        producers = [p for p, c in edges if c == join]
        consumers = [c for p, c in edges if p == join]
        sorts, new_join = new_ids[:-1], new_ids[-1]
        edges = [e for e in edges if join not in e]
        for p, s in zip(producers, sorts):
            edges += [(p, s), (s, new_join)]
        edges += [(new_join, c) for c in consumers]
        nodes = [n for n in nodes if n.id != join]
        dop.pop(join, None)
    else:
        p, c = ev.affected_ids
        i = edges.index((p, c))
        chain = [p, *new_ids, c]
        edges[i:i + 1] = list(zip(chain, chain[1:]))
    nodes += list(ev.inserted)
    for inst in ev.inserted:
        dop[inst.id] = int(inst.params.get("dop", 1))
    return dataclasses.replace(spec, nodes=tuple(nodes), edges=tuple(edges), dop=dop,
                               modifications=tuple(m for m in spec.modifications if m is not ev))


# -------------------------------------------------------------- row flow

def output_rows(inst: OperatorInstance, rows: int, state: dict) -> int:
    """Rows leaving ``inst`` for an input chunk of ``rows`` rows.

    ``state`` carries per-operator running totals (only Limit uses it).
    """
    t, p = inst.op_type, inst.params
    if t == "Filter":
        return int(rows * float(p.get("selectivity", 1.0)))
    if t in ("HashJoin", "MergeJoin"):
        return int(rows * float(p.get("match_ratio", 1.0)))
    if t == "Aggregate":
        return max(1, math.ceil(rows * float(p.get("group_ratio", 1.0)))) if rows else 0
    if t == "Limit":
        left = int(p.get("limit", rows)) - state.get("emitted", 0)
        out = max(0, min(rows, left))
        state["emitted"] = state.get("emitted", 0) + out
        return out
    return rows


def source_chunk_rows(total_rows: int, chunk_rows: int) -> list[int]:
    total_rows = int(total_rows)
    full, rest = divmod(total_rows, chunk_rows)
    return [chunk_rows] * full + ([rest] if rest else [])


def plan_flow(nodes, edges, chunk_rows):
    """Exact row flow of a static pipeline.

    Returns ``(per_node, per_edge)`` where ``per_node[id] = (input_rows,
    n_input_chunks)`` (scans report their table) and ``per_edge[(p, c)] =
    (rows, n_chunks)`` sent from ``p`` to ``c``.
    """
    node_map = {n.id: n for n in nodes}
    prods = defaultdict(list)
    cons = defaultdict(list)
    for p, c in edges:
        prods[c].append(p)
        cons[p].append(c)
    outputs = {}
    per_node, per_edge = {}, {}
    pending = [n.id for n in nodes]
    while pending:
        ready = [nid for nid in pending if all(p in outputs for p in prods[nid])]
        if not ready:
            raise SpecError("cycle while propagating cardinalities")
        for nid in ready:
            inst = node_map[nid]
            if not prods[nid]:
                chunks_in = source_chunk_rows(inst.input_rows, chunk_rows)
            else:
                chunks_in = []
                for p in prods[nid]:
                    k = len(cons[p])
                    # round-robin split across multiple consumers
                    share = outputs[p][cons[p].index(nid)::k]
                    per_edge[(p, nid)] = (sum(share), len(share))
                    chunks_in += share
            state = {}
            out = [output_rows(inst, r, state) for r in chunks_in]
            outputs[nid] = [r for r in out if r > 0]
            per_node[nid] = (sum(chunks_in), len(chunks_in))
            pending.remove(nid)
    return per_node, per_edge


def plan_cardinalities(nodes, edges, chunk_rows):
    return plan_flow(nodes, edges, chunk_rows)[0]
