"""Discrete-event executor for DAG pipelines with resource contention.

Every (operator, chunk) pair is a task.  An operator runs at most ``dop``
tasks at once.  Active tasks progress at rate ``1 / slowdown`` where the
slowdown multiplies ``1 + c_r * (k_r - 1)`` over the operator's bound
resources ``r`` and ``k_r`` counts active tasks bound on ``r``.  Rates are
recomputed whenever the active set changes, so the timeline is exact for
the piecewise-constant rate model.

Serial execution is the same loop with a global limit of one task, no
contention and a depth-first pick order, so each chunk is pushed to the
sink before the next source chunk starts.
"""
from __future__ import annotations

import dataclasses
from collections import defaultdict, deque

import numpy as np

from ..domain import (DEFAULT_CATALOG, RESOURCES, ChunkTrace, CostRecord, OperatorRecord,
                      QueryTrace, TraceMode)
from .costs import BackgroundLoad, CostGroundTruthModel, snapshot_utilization
from .pipeline import (PARALLELIZABLE, Action, PipelineSpec, SpecError, output_rows,
                       source_chunk_rows, validate_spec)

_EPS = 1e-12


class _Chunk:
    __slots__ = ("chunk_id", "rows", "path", "records", "from_op")

    def __init__(self, chunk_id, rows):
        self.chunk_id = chunk_id
        self.rows = rows
        self.path = []
        self.records = []
        self.from_op = None


class _Task:
    __slots__ = ("op", "chunk", "remaining", "start", "cost", "seq", "slowdown")

    def __init__(self, op, chunk, remaining, start, cost, seq):
        self.op = op
        self.chunk = chunk
        self.remaining = remaining
        self.start = start
        self.cost = cost
        self.seq = seq
        self.slowdown = 1.0


@dataclasses.dataclass
class RunResult:
    makespan: float
    finished: list           # terminated chunks, in termination order
    results: int             # chunks that reached the sink
    records: dict            # op_id -> list[CostRecord]
    used_ops: dict           # op_id -> OperatorInstance
    utils: dict              # op_id -> ResourceUtilization
    fired: list


class _Run:
    def __init__(self, spec: PipelineSpec, model: CostGroundTruthModel, seed: int, *,
                 serial: bool, contention: bool, probe_chunks=None, catalog=DEFAULT_CATALOG):
        validate_spec(spec, catalog)
        self.spec = spec
        self.model = model
        self.seed = int(seed)
        self.serial = serial
        self.contention = contention and not serial
        self.probe_chunks = probe_chunks
        self.catalog = catalog

        self.ops = dict(spec.node_map)
        for ev in spec.modifications:
            for inst in ev.inserted:
                self.ops[inst.id] = inst
        self.routes = {k: list(v) for k, v in spec.consumers().items()}
        self.rr = defaultdict(int)
        self.sink = spec.sink_id
        self.dop = {}
        for op_id, inst in self.ops.items():
            d = spec.dop_of(op_id) if op_id in spec.node_map else int(inst.params.get("dop", 1))
            self.dop[op_id] = 1 if serial or inst.op_type not in PARALLELIZABLE else max(1, d)
        self.bound = {op_id: [r for r in RESOURCES if catalog[inst.op_type].bound_to(r)]
                      for op_id, inst in self.ops.items()}
        self.pending_events = list(spec.modifications)
        self.processed = defaultdict(int)
        self.limit_state = defaultdict(dict)
        self.load = BackgroundLoad(spec.background_level, seed=self.seed)
        self.utils = {}
        self.noise_draws = {}
        self.n_source_chunks = sum(len(source_chunk_rows(self.ops[s].input_rows, spec.chunk_rows))
                                   for s in spec.source_ids)
        self.depth = self._sink_distance()

    def _sink_distance(self):
        # distance to sink over the union of static and inserted edges
        edges = list(self.spec.edges)
        for ev in self.spec.modifications:
            edges += list(_event_edges(self.spec, ev))
        cons = defaultdict(list)
        for p, c in edges:
            cons[p].append(c)
        memo = {}

        def dist(i, guard=0):
            if i in memo:
                return memo[i]
            if guard > len(self.ops) + 1:
                raise SpecError("cycle in pipeline")
            memo[i] = 0 if not cons[i] else 1 + min(dist(c, guard + 1) for c in cons[i])
            return memo[i]

        return {i: dist(i) for i in self.ops}

    def _util(self, op_id):
        if op_id not in self.utils:
            self.utils[op_id] = snapshot_utilization(self.load, op_id)
        return self.utils[op_id]

    def _noise(self, op_id, chunk_id):
        # one draw per (operator, chunk) so the noise does not depend on processing order
        if self.model.noise == 0:
            return 1.0
        draws = self.noise_draws.get(op_id)
        if draws is None:
            rng = np.random.default_rng([self.seed & 0xFFFFFFFF, 0x5EED, op_id])
            draws = self.noise_draws[op_id] = rng.standard_normal(self.n_source_chunks)
        return float(np.exp(self.model.noise * draws[chunk_id]))

    def run(self) -> RunResult:
        queues = {op_id: deque() for op_id in self.ops}
        arrival = 0
        chunk_seq = 0
        # source chunks are queued round-robin across sources
        per_source = [(s, source_chunk_rows(self.ops[s].input_rows, self.spec.chunk_rows))
                      for s in sorted(self.spec.source_ids)]
        longest = max((len(rows) for _, rows in per_source), default=0)
        for k in range(longest):
            for s, rows in per_source:
                if k < len(rows):
                    ch = _Chunk(chunk_seq, rows[k])
                    chunk_seq += 1
                    queues[s].append((arrival, ch))
                    arrival += 1

        busy = defaultdict(int)
        active = []
        finished, records = [], defaultdict(list)
        results = 0
        record_seq = 0
        task_seq = 0
        now = 0.0
        fired = []
        order = sorted(self.ops, key=lambda i: (self.depth[i], i)) if self.serial else sorted(self.ops)
        stop = False

        while not stop:
            # admit tasks
            for op_id in order:
                q = queues[op_id]
                while q and busy[op_id] < self.dop[op_id] and not (self.serial and active):
                    _, ch = q.popleft()
                    inst = self.ops[op_id]
                    cost = self.model.chunk_cost(inst, ch.rows, self._util(op_id),
                                                 self._noise(op_id, ch.chunk_id))
                    active.append(_Task(op_id, ch, cost.elapsed_time, now, cost, task_seq))
                    task_seq += 1
                    busy[op_id] += 1
                if self.serial and active:
                    break
            if not active:
                break

            if self.contention:
                counts = {r: 0 for r in RESOURCES}
                for t in active:
                    for r in self.bound[t.op]:
                        counts[r] += 1
                for t in active:
                    s = 1.0
                    for r in self.bound[t.op]:
                        s *= 1.0 + self.model.penalties[r] * (counts[r] - 1)
                    t.slowdown = s
            dt = min(t.remaining * t.slowdown for t in active)
            now += dt
            done, still = [], []
            for t in active:
                t.remaining -= dt / t.slowdown
                if t.remaining <= _EPS * max(t.cost.elapsed_time, 1e-30):
                    done.append(t)
                else:
                    still.append(t)
            active = still
            done.sort(key=lambda t: (t.op, t.seq))

            for t in done:
                busy[t.op] -= 1
                op_id, ch = t.op, t.chunk
                elapsed = now - t.start
                rec = CostRecord(record_seq, ch.chunk_id, ch.rows,
                                 dataclasses.replace(t.cost, elapsed_time=elapsed),
                                 start=t.start, end=now)
                record_seq += 1
                records[op_id].append(rec)
                ch.path.append(op_id)
                ch.records.append(rec.record_id)
                self.processed[op_id] += 1
                inst = self.ops[op_id]
                out = output_rows(inst, ch.rows, self.limit_state[op_id])
                if op_id == self.sink or out == 0:
                    finished.append(ch)
                    if op_id == self.sink:
                        results += 1
                        if self.probe_chunks is not None and results >= self.probe_chunks:
                            stop = True
                else:
                    ch.rows = out
                    ch.from_op = op_id
                    nxt = self._route(op_id)
                    queues[nxt].append((arrival, ch))
                    arrival += 1
                self._maybe_fire(op_id, queues, fired)
                if stop:
                    break

        used = {op_id: self.ops[op_id] for op_id in self.ops
                if op_id in self.spec.node_map or records.get(op_id)}
        return RunResult(now, finished, results, dict(records), used,
                         {i: self._util(i) for i in used}, fired)

    def _route(self, op_id):
        cons = self.routes[op_id]
        i = self.rr[op_id] % len(cons)
        self.rr[op_id] += 1
        return cons[i]

    def _maybe_fire(self, op_id, queues, fired):
        for ev in list(self.pending_events):
            if ev.watched_id != op_id or self.processed[op_id] != ev.trigger_chunk:
                continue
            self.pending_events.remove(ev)
            fired.append(ev)
            if ev.action is Action.REPLACE_JOIN_ALGO:
                join = ev.affected_ids[0]
                producers = [p for p, c in self.spec.edges if c == join]
                sorts, new_join = [i.id for i in ev.inserted[:-1]], ev.inserted[-1].id
                redirect = {}
                for p, s in zip(producers, sorts):
                    self.routes[p] = [s if c == join else c for c in self.routes[p]]
                    self.routes[s] = [new_join]
                    redirect[p] = s
                self.routes[new_join] = list(self.routes.get(join, []))
                old = queues[join]
                keep = deque()
                for item in old:
                    tgt = redirect.get(item[1].from_op)
                    (queues[tgt] if tgt is not None else keep).append(item)
                queues[join] = keep
            else:
                p, c = ev.affected_ids
                chain = [i.id for i in ev.inserted]
                self.routes[p] = [chain[0] if x == c else x for x in self.routes[p]]
                for a, b in zip(chain, chain[1:]):
                    self.routes[a] = [b]
                self.routes[chain[-1]] = [c]
                keep = deque()
                for item in queues[c]:
                    (queues[chain[0]] if item[1].from_op == p else keep).append(item)
                queues[c] = keep


def _event_edges(spec, ev):
    if ev.action is Action.REPLACE_JOIN_ALGO:
        join = ev.affected_ids[0]
        producers = [p for p, c in spec.edges if c == join]
        consumers = [c for p, c in spec.edges if p == join]
        sorts, new_join = [i.id for i in ev.inserted[:-1]], ev.inserted[-1].id
        for p, s in zip(producers, sorts):
            yield (p, s)
            yield (s, new_join)
        for c in consumers:
            yield (new_join, c)
    else:
        chain = [ev.affected_ids[0], *[i.id for i in ev.inserted], ev.affected_ids[1]]
        yield from zip(chain, chain[1:])


def _trace_from(spec, res: RunResult, mode, chunks, latency=None, probe_budget=None):
    keep_records = {rid for ch in chunks for rid in ch.records}
    ops = {}
    for op_id, inst in res.used_ops.items():
        recs = tuple(r for r in res.records.get(op_id, ()) if r.record_id in keep_records)
        params = dict(inst.params)
        params["dop"] = int(spec.dop_of(op_id) if op_id in spec.node_map
                            else inst.params.get("dop", 1))
        ops[op_id] = OperatorRecord(dataclasses.replace(inst, params=params),
                                    res.utils[op_id], recs)
    if mode is TraceMode.PROBE:
        referenced = {op for ch in chunks for op in ch.path}
        ops = {k: v for k, v in ops.items() if k in referenced}
    ordered = sorted(chunks, key=lambda c: c.chunk_id)
    return QueryTrace(
        query_id=spec.query_id,
        mode=mode,
        chunks=tuple(ChunkTrace(c.chunk_id, tuple(c.path), tuple(c.records)) for c in ordered),
        operators=ops,
        total_latency=latency,
        template_id=spec.template_id,
        probe_budget=probe_budget,
    )


def execute_serial(spec: PipelineSpec, model: CostGroundTruthModel, seed) -> QueryTrace:
    """Full-collection run: dop 1, one task at a time, no contention."""
    res = _Run(spec, model, seed, serial=True, contention=False).run()
    return _trace_from(spec, res, TraceMode.FULL_COLLECTION, res.finished)


def execute_parallel(spec: PipelineSpec, model: CostGroundTruthModel, seed,
                     contention: bool = True) -> QueryTrace:
    """Full parallel run; ``total_latency`` is the simulated wall clock."""
    res = _Run(spec, model, seed, serial=False, contention=contention).run()
    return _trace_from(spec, res, TraceMode.FULL_COLLECTION, res.finished, latency=res.makespan)


def execute_probe(spec: PipelineSpec, model: CostGroundTruthModel, seed,
                  probe_chunks: int) -> QueryTrace:
    """Parallel run stopped once ``probe_chunks`` result chunks reached the sink.

    The trace keeps the result chunks plus every chunk that terminated
    earlier (e.g. emptied by a filter); chunks still in flight are dropped.
    """
    if probe_chunks < 1:
        raise ValueError("probe_chunks must be >= 1")
    res = _Run(spec, model, seed, serial=False, contention=True, probe_chunks=probe_chunks).run()
    return _trace_from(spec, res, TraceMode.PROBE, res.finished, probe_budget=probe_chunks)


def simulate_latency(spec, model, seed, contention=True) -> float:
    return _Run(spec, model, seed, serial=False, contention=contention).run().makespan
