"""Data-flow trees merged from chunk execution paths.

Each chunk path is oriented sink-first and inserted into a trie keyed by
operator id; paths recorded before and after a runtime pipeline change share
their common prefix and branch where they diverge.
"""
from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .domain import DEFAULT_CATALOG, COST_FIELDS, CostVector, QueryTrace


class DataflowError(ValueError):
    pass


@dataclass
class FlowNode:
    operator_id: int
    op_type: str | None = None
    children: list = field(default_factory=list)
    multiplicity: int = 0
    record_ids: list = field(default_factory=list)
    cost: CostVector | None = None

    def child(self, operator_id):
        for c in self.children:
            if c.operator_id == operator_id:
                return c
        return None

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


class DataFlowTree:
    """A rooted tree plus its breadth-first node order."""

    def __init__(self, root: FlowNode, n_paths: int):
        self.root = root
        self.n_paths = n_paths
        order, q = [], deque([root])
        while q:
            node = q.popleft()
            order.append(node)
            q.extend(node.children)
        self.nodes = order
        self._pos = {id(n): i for i, n in enumerate(order)}

    @property
    def N(self):
        return len(self.nodes)

    def __len__(self):
        return len(self.nodes)

    def position(self, node) -> int:
        return self._pos[id(node)]

    def parent_index(self):
        out = [-1] * len(self.nodes)
        for i, n in enumerate(self.nodes):
            for c in n.children:
                out[self._pos[id(c)]] = i
        return out

    def children_index(self):
        return [[self._pos[id(c)] for c in n.children] for n in self.nodes]

    def depths(self):
        out = [0] * len(self.nodes)
        for i, n in enumerate(self.nodes):
            for c in n.children:
                out[self._pos[id(c)]] = out[i] + 1
        return out

    def leaf_paths(self):
        """Root-to-leaf operator-id sequences."""
        out = []

        def rec(node, prefix):
            prefix = prefix + [node.operator_id]
            if not node.children:
                out.append(prefix)
            for c in node.children:
                rec(c, prefix)

        rec(self.root, [])
        return out

    def path_shapes(self):
        """Distinct root-to-leaf sequences of operator types."""
        types = {}
        for n in self.nodes:
            types[n.operator_id] = n.op_type
        return {tuple(types[i] for i in p) for p in self.leaf_paths()}

    def to_dot(self, name="dataflow") -> str:
        lines = [f"digraph {name} {{"]
        for i, n in enumerate(self.nodes):
            label = f"{n.op_type or ''} #{n.operator_id}\\nx{n.multiplicity}"
            lines.append(f'  n{i} [label="{label}"];')
        for i, n in enumerate(self.nodes):
            for c in n.children:
                lines.append(f"  n{i} -> n{self._pos[id(c)]};")
        lines.append("}")
        return "\n".join(lines)


def build_dataflow_tree(paths, op_types=None, record_paths=None) -> DataFlowTree:
    """Merge oriented paths into a trie.

    ``op_types`` maps operator id to type name; ``record_paths`` (aligned
    with ``paths``) attaches cost-record ids to the nodes each path visits.
    """
    paths = [list(p) for p in paths]
    if not paths:
        raise DataflowError("no paths to build a data-flow tree from")
    if any(not p for p in paths):
        raise DataflowError("empty chunk path")
    first = {p[0] for p in paths}
    if len(first) != 1:
        raise DataflowError(f"paths start at different operators {sorted(first)}")
    op_types = op_types or {}
    root = FlowNode(paths[0][0], op_types.get(paths[0][0]))
    for k, path in enumerate(paths):
        recs = record_paths[k] if record_paths is not None else None
        node = root
        node.multiplicity += 1
        if recs is not None:
            node.record_ids.append(recs[0])
        for depth, op in enumerate(path[1:], start=1):
            nxt = node.child(op)
            if nxt is None:
                nxt = FlowNode(op, op_types.get(op))
                node.children.append(nxt)
            nxt.multiplicity += 1
            if recs is not None:
                nxt.record_ids.append(recs[depth])
            node = nxt
    return DataFlowTree(root, len(paths))


def orient_paths(trace: QueryTrace, catalog=DEFAULT_CATALOG, with_records=False):
    """Sink-first operator paths of every chunk that reached the result.

    Chunks that ended early (emptied by a filter or limit) never reached the
    sink and are not part of the result data flow, so they are skipped.
    """
    sinks = set()
    paths, recs = [], []
    for c in trace.chunks:
        if not c.transform_addr:
            continue
        last = c.transform_addr[-1]
        rec = trace.operators.get(last)
        if rec is None or rec.instance.op_type != "Sink":
            continue
        sinks.add(last)
        paths.append(list(reversed(c.transform_addr)))
        recs.append(list(reversed(c.record_addr)))
    if len(sinks) > 1:
        raise DataflowError(f"chunks end at different sinks {sorted(sinks)}")
    if not paths:
        raise DataflowError(f"trace {trace.query_id} has no chunk that reached a sink")
    return (paths, recs) if with_records else paths


def tree_from_trace(trace: QueryTrace, catalog=DEFAULT_CATALOG) -> DataFlowTree:
    """Tree of a trace with chunks taken in chunk-id order (so the node order
    does not depend on how the chunks happen to be listed)."""
    ordered = sorted(trace.chunks, key=lambda c: c.chunk_id)
    if list(ordered) != list(trace.chunks):
        trace = dataclasses.replace(trace, chunks=tuple(ordered))
    paths, recs = orient_paths(trace, catalog, with_records=True)
    types = {k: v.instance.op_type for k, v in trace.operators.items()}
    return build_dataflow_tree(paths, types, recs)


def to_adjacency(tree: DataFlowTree) -> np.ndarray:
    n = tree.N
    m = np.zeros((n, n))
    for i, kids in enumerate(tree.children_index()):
        for j in kids:
            m[i, j] = 1.0
    return m


def attach_costs(tree: DataFlowTree, trace: QueryTrace, cost_vectors=None) -> DataFlowTree:
    """Set each node's cost to the mean of the per-chunk costs that visited it.

    ``cost_vectors`` optionally maps ``(operator_id, chunk_id)`` to a
    CostVector and overrides the measured records.  Nodes built without
    record ids fall back to every record of their operator.
    """
    index = trace.record_index()
    for node in tree.nodes:
        rids = list(dict.fromkeys(node.record_ids))
        if not rids:
            rec = trace.operators.get(node.operator_id)
            rids = [r.record_id for r in rec.records] if rec else []
        vecs = []
        for rid in rids:
            if rid not in index:
                continue
            op_id, r = index[rid]
            if op_id != node.operator_id:
                continue
            if cost_vectors is not None and (op_id, r.chunk_id) in cost_vectors:
                vecs.append(cost_vectors[(op_id, r.chunk_id)].to_array())
            else:
                vecs.append(r.cost.to_array())
        if not vecs:
            raise DataflowError(f"no cost records for operator {node.operator_id}")
        node.cost = CostVector.from_array(np.mean(vecs, axis=0))
        if node.op_type is None and node.operator_id in trace.operators:
            node.op_type = trace.operators[node.operator_id].instance.op_type
    return tree


__all__ = ["FlowNode", "DataFlowTree", "DataflowError", "build_dataflow_tree", "orient_paths",
           "tree_from_trace", "to_adjacency", "attach_costs", "COST_FIELDS"]
