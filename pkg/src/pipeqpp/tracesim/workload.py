"""Seeded workload templates and query generation."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from ..domain import OperatorInstance
from .pipeline import (PARALLELIZABLE, Action, ModificationEvent, PipelineSpec, SpecError,
                       plan_flow, validate_spec)

EXTRA_STAGE = {"Expression": 0, "Aggregate": 1, "PartialSort": 2, "Exchange": 3, "Limit": 4}
_SINGLETON_EXTRAS = {"Aggregate", "Limit"}


@dataclass(frozen=True)
class WorkloadTemplate:
    template_id: int
    depth: tuple = (3, 6)
    joins: tuple = (0, 2)
    table_rows: tuple = (4096, 65536)
    cols: tuple = (2, 12)
    selectivity: tuple = (0.1, 0.9)
    dop: tuple = (1, 4)
    background: tuple = (0.0, 0.6)
    extra_ops: tuple = ("Expression", "Aggregate", "PartialSort", "Exchange")
    modification_prob: float = 0.3
    # a join switches algorithm once observed rows exceed this multiple of the estimate
    switch_factor: float = 2.0
    chunk_rows: int = 1024

    def __post_init__(self):
        for name in ("depth", "joins", "table_rows", "cols", "selectivity", "dop", "background"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise SpecError(f"template {self.template_id}: empty {name} range ({lo}, {hi})")
            object.__setattr__(self, name, (lo, hi))
        object.__setattr__(self, "extra_ops", tuple(self.extra_ops))
        if not 0.0 <= self.modification_prob <= 1.0:
            raise SpecError("modification_prob must be in [0, 1]")
        bad = set(self.extra_ops) - set(EXTRA_STAGE)
        if bad:
            raise SpecError(f"unsupported extra operators {sorted(bad)}")

    def check_feasible(self):
        if self.depth[0] < 3 and self.depth[1] < 3:
            raise SpecError(f"template {self.template_id}: depth must allow Scan, Filter, Sink")
        if self.depth[1] < 3 + self.joins[0]:
            raise SpecError(f"template {self.template_id}: depth {self.depth} cannot hold "
                            f"{self.joins[0]} joins")
        if self.table_rows[0] < 1 or self.cols[0] < 1 or self.dop[0] < 1:
            raise SpecError(f"template {self.template_id}: rows, cols and dop must be >= 1")
        if self.selectivity[0] <= 0 or self.selectivity[1] > 1:
            raise SpecError(f"template {self.template_id}: selectivity must lie in (0, 1]")
        extras_needed = self.depth[1] - 3 - self.joins[1]
        if extras_needed > 0 and not self.extra_ops and self.depth[0] > 3 + self.joins[1]:
            raise SpecError(f"template {self.template_id}: no extra operators to fill depth")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


def make_templates(n: int, seed: int) -> list[WorkloadTemplate]:
    """Draw ``n`` structurally different templates from one seed."""
    rng = np.random.default_rng(seed)
    pool = ("Expression", "Aggregate", "PartialSort", "Exchange", "Limit")
    out = []
    for tid in range(n):
        j_lo = int(rng.integers(0, 3))
        j_hi = j_lo + int(rng.integers(0, 2))
        d_lo = 3 + j_lo + int(rng.integers(0, 2))
        d_hi = max(d_lo, 3 + j_hi) + int(rng.integers(0, 3))
        r_lo = int(2 ** rng.integers(12, 15))
        r_hi = int(r_lo * 2 ** rng.integers(1, 4))
        s_lo = float(np.round(rng.uniform(0.1, 0.5), 2))
        s_hi = float(np.round(min(1.0, s_lo + rng.uniform(0.2, 0.5)), 2))
        dop_hi = int(rng.integers(1, 7))
        k = int(rng.integers(2, 5))
        extras = tuple(sorted(rng.choice(pool, size=k, replace=False).tolist(),
                              key=pool.index))
        out.append(WorkloadTemplate(
            template_id=tid,
            depth=(d_lo, d_hi),
            joins=(j_lo, j_hi),
            table_rows=(r_lo, r_hi),
            cols=(int(rng.integers(2, 6)), int(rng.integers(6, 17))),
            selectivity=(s_lo, s_hi),
            dop=(1, dop_hi),
            background=(0.0, float(np.round(rng.uniform(0.2, 0.8), 2))),
            extra_ops=extras,
            modification_prob=float(np.round(rng.uniform(0.1, 0.6), 2)),
            switch_factor=float(np.round(rng.uniform(1.5, 3.0), 2)),
        ))
    return out


def query_seeds(template_id: int, n: int, seed: int) -> list[int]:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(template_id)])
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in ss.spawn(n)]


def generate_workload(template: WorkloadTemplate, n_queries: int, seed: int) -> list[PipelineSpec]:
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    template.check_feasible()
    return [_generate_one(template, i, s)
            for i, s in enumerate(query_seeds(template.template_id, n_queries, seed))]


class _Builder:
    def __init__(self):
        self.nodes = {}
        self.edges = []
        self.next_id = 0

    def add(self, op_type, params, cols, rows=0):
        inst = OperatorInstance(self.next_id, op_type, params, rows, max(1, int(cols)))
        self.nodes[inst.id] = inst
        self.next_id += 1
        return inst.id

    def link(self, p, c):
        self.edges.append((p, c))


def _uniform_int(rng, lo_hi):
    return int(rng.integers(lo_hi[0], lo_hi[1] + 1))


def _log_uniform_int(rng, lo_hi):
    lo, hi = lo_hi
    return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi))))) if hi > lo else int(lo)


def _scan_filter(b, rng, t):
    cols = _uniform_int(rng, t.cols)
    scan = b.add("Scan", {"format": str(rng.choice(["native", "parquet"]))}, cols,
                 rows=_log_uniform_int(rng, t.table_rows))
    filt = b.add("Filter", {
        "selectivity": float(np.round(rng.uniform(*t.selectivity), 3)),
        "n_predicates": _uniform_int(rng, (1, 4)),
        "predicate": str(rng.choice(["eq", "range", "like"])),
    }, cols)
    b.link(scan, filt)
    return filt, cols


def _extra_params(op, rng, cols):
    if op == "Expression":
        n = _uniform_int(rng, (1, 5))
        return {"n_exprs": n}, cols + n
    if op == "Aggregate":
        keys, aggs = _uniform_int(rng, (1, 4)), _uniform_int(rng, (1, 6))
        return {"group_ratio": float(np.round(rng.uniform(0.05, 0.6), 3)), "n_keys": keys,
                "n_aggs": aggs, "method": str(rng.choice(["hash", "two_level"]))}, keys + aggs
    if op == "PartialSort":
        return {"n_keys": _uniform_int(rng, (1, 3))}, cols
    if op == "Exchange":
        return {"n_partitions": int(rng.choice([2, 4, 8, 16]))}, cols
    if op == "Limit":
        return {"limit": int(2 ** rng.integers(12, 17))}, cols
    raise SpecError(f"no parameter generator for {op}")


def _generate_one(t: WorkloadTemplate, index: int, seed: int) -> PipelineSpec:
    rng = np.random.default_rng(seed)
    n_joins = min(_uniform_int(rng, t.joins), t.depth[1] - 3)
    depth = _uniform_int(rng, (max(t.depth[0], 3 + n_joins), t.depth[1]))
    n_extra = depth - 3 - n_joins
    extras = []
    for _ in range(n_extra):
        pool = [o for o in t.extra_ops if not (o in _SINGLETON_EXTRAS and o in extras)]
        extras.append(str(rng.choice(pool)) if pool else "Expression")
    stage0 = ["HashJoin"] * n_joins + [e for e in extras if EXTRA_STAGE[e] == 0]
    rng.shuffle(stage0)
    middle = list(stage0) + sorted((e for e in extras if EXTRA_STAGE[e] > 0),
                                   key=EXTRA_STAGE.get)

    b = _Builder()
    prev, cols = _scan_filter(b, rng, t)
    for op in middle:
        if op == "HashJoin":
            build, bcols = _scan_filter(b, rng, t)
            if rng.random() < 0.5:
                params, bcols2 = _extra_params("Expression", rng, bcols)
                e = b.add("Expression", params, bcols)
                b.link(build, e)
                build, bcols = e, bcols2
            j = b.add("HashJoin", {"match_ratio": float(np.round(rng.uniform(0.3, 1.5), 3)),
                                   "n_keys": _uniform_int(rng, (1, 3))}, cols + bcols)
            b.link(build, j)
            b.link(prev, j)
            prev, cols = j, cols + bcols
        else:
            params, out_cols = _extra_params(op, rng, cols)
            nid = b.add(op, params, cols)
            b.link(prev, nid)
            prev, cols = nid, out_cols
    sink = b.add("Sink", {}, cols)
    b.link(prev, sink)

    card, edge_rows = plan_flow(list(b.nodes.values()), b.edges, t.chunk_rows)
    nodes = []
    for nid in sorted(b.nodes):
        inst = b.nodes[nid]
        if inst.op_type != "Scan":
            inst = inst.with_rows(card[nid][0])
        # the planner knows how many chunks each operator will receive
        inst = dataclasses.replace(inst, params={**inst.params, "input_chunks": card[nid][1]})
        nodes.append(inst)
    q_dop = _uniform_int(rng, t.dop)
    dop = {n.id: q_dop for n in nodes if n.op_type in PARALLELIZABLE and q_dop > 1}

    mods = ()
    node_map = {n.id: n for n in nodes}
    joins = [n.id for n in nodes if n.op_type == "HashJoin"]
    aggs = [n.id for n in nodes if n.op_type == "Aggregate"]
    fire = rng.random() < t.modification_prob
    if fire and joins:
        jid = joins[int(rng.integers(len(joins)))]
        ev = _join_switch(node_map, b.edges, card, edge_rows, jid, rng, t, b.next_id)
        mods = (ev,) if ev else ()
    elif fire and aggs:
        aid = aggs[0]
        ev = _insert_exchange(node_map, b.edges, card, aid, rng, t, b.next_id)
        mods = (ev,) if ev else ()
    if mods:
        jid = mods[0].affected_ids[-1]
        est = mods[0].inserted[-1].params.get("planner_estimate")
        if est is not None and jid in node_map:
            node = node_map[jid]
            node_map[jid] = dataclasses.replace(
                node, params={**node.params, "planner_estimate": est})
            nodes = [node_map[n.id] for n in nodes]

    spec = PipelineSpec(
        query_id=f"t{t.template_id:03d}_q{index:04d}",
        nodes=tuple(nodes), edges=tuple(b.edges), dop=dop, modifications=mods,
        template_id=t.template_id, seed=seed, chunk_rows=t.chunk_rows,
        background_level=float(np.round(rng.uniform(*t.background), 4)),
    )
    validate_spec(spec)
    return spec


def _trigger(card, nid, rng, t):
    rows, n_chunks = card[nid]
    if n_chunks < 2 or rows == 0:
        return None, None
    # planner underestimates; the switch fires once observed rows pass the threshold
    estimate = rows * float(rng.uniform(0.02, 0.35))
    per_chunk = rows / n_chunks
    trigger = max(1, math.ceil(t.switch_factor * estimate / per_chunk))
    if trigger >= n_chunks:
        return None, None
    return trigger, int(round(estimate))


def _join_switch(nodes, edges, card, edge_rows, jid, rng, t, next_id):
    trigger, estimate = _trigger(card, jid, rng, t)
    if trigger is None:
        return None
    join = nodes[jid]
    producers = [p for p, c in edges if c == jid]
    inserted = [OperatorInstance(next_id + i, "MergeSort",
                                 {"n_keys": join.params.get("n_keys", 1), "dop": 1,
                                  "input_chunks": edge_rows[(p, jid)][1]},
                                 edge_rows[(p, jid)][0], nodes[p].input_cols)
                for i, p in enumerate(producers)]
    inserted.append(OperatorInstance(next_id + len(producers), "MergeJoin",
                                     {"match_ratio": join.params["match_ratio"],
                                      "n_keys": join.params.get("n_keys", 1), "dop": 1,
                                      "planner_estimate": estimate,
                                      "input_chunks": card[jid][1]},
                                     join.input_rows, join.input_cols))
    return ModificationEvent(trigger, Action.REPLACE_JOIN_ALGO, (jid,), tuple(inserted))


def _insert_exchange(nodes, edges, card, aid, rng, t, next_id):
    trigger, estimate = _trigger(card, aid, rng, t)
    if trigger is None:
        return None
    producer = next(p for p, c in edges if c == aid)
    agg = nodes[aid]
    ex = OperatorInstance(next_id, "Exchange",
                          {"n_partitions": int(rng.choice([4, 8, 16])), "dop": 1,
                           "planner_estimate": estimate, "input_chunks": card[aid][1]},
                          agg.input_rows, agg.input_cols)
    return ModificationEvent(trigger, Action.INSERT_OPERATORS, (producer, aid), (ex,))
