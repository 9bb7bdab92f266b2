"""Core vocabulary: operator catalog, cost vectors, chunk and query traces.

Traces are exchanged as JSONL, one :class:`QueryTrace` per line.  That file
format is the seam where a real DBMS tracker could stand in for the
simulator, so field names match the dataclass attributes exactly.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np


class Resource(str, enum.Enum):
    CPU = "CPU"
    MEM = "MEM"
    IO = "IO"


RESOURCES = (Resource.CPU, Resource.MEM, Resource.IO)


@dataclass(frozen=True)
class OperatorType:
    name: str
    simd: bool
    bound_resources: frozenset

    def __post_init__(self):
        if not self.bound_resources:
            raise ValueError(f"operator type {self.name} has no bound resources")
        object.__setattr__(self, "bound_resources",
                           frozenset(Resource(r) for r in self.bound_resources))

    def bound_to(self, resource) -> bool:
        return Resource(resource) in self.bound_resources


class Catalog:
    """Totally ordered, immutable set of operator types.

    The position of a type in the catalog is its row/column in every
    meta-competition matrix, so the default order must never change.
    """

    def __init__(self, types: Iterable[OperatorType]):
        self.types = tuple(types)
        if not self.types:
            raise ValueError("catalog must contain at least one operator type")
        self._index = {t.name: i for i, t in enumerate(self.types)}
        if len(self._index) != len(self.types):
            raise ValueError("duplicate operator type names in catalog")

    def __len__(self):
        return len(self.types)

    def __iter__(self):
        return iter(self.types)

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, name) -> OperatorType:
        return self.types[self._index[name]]

    def index(self, name) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"operator type {name!r} is not in the catalog") from None

    @property
    def names(self):
        return [t.name for t in self.types]

    def to_dict(self):
        return [{"name": t.name, "simd": t.simd,
                 "bound_resources": sorted(r.value for r in t.bound_resources)}
                for t in self.types]

    @classmethod
    def from_dict(cls, data):
        return cls(OperatorType(d["name"], d["simd"], frozenset(d["bound_resources"]))
                   for d in data)


def _t(name, simd, *res):
    return OperatorType(name, simd, frozenset(res))


DEFAULT_CATALOG = Catalog([
    _t("Scan", False, "IO"),
    _t("Filter", True, "CPU"),
    _t("Expression", True, "CPU"),
    _t("HashJoin", True, "CPU", "MEM"),
    _t("MergeJoin", False, "CPU"),
    _t("MergeSort", False, "CPU", "MEM"),
    _t("PartialSort", False, "CPU"),
    _t("Aggregate", True, "CPU", "MEM"),
    _t("Exchange", False, "MEM"),
    _t("Limit", False, "CPU"),
    _t("Sink", False, "IO"),
])


@dataclass(frozen=True)
class OperatorInstance:
    id: int
    op_type: str
    params: Mapping = field(default_factory=dict)
    input_rows: float = 0.0
    input_cols: int = 1

    def __post_init__(self):
        if self.input_rows < 0:
            raise ValueError(f"operator {self.id}: input_rows must be >= 0")
        if self.input_cols < 1:
            raise ValueError(f"operator {self.id}: input_cols must be >= 1")
        object.__setattr__(self, "params", dict(self.params))

    def with_rows(self, rows) -> "OperatorInstance":
        return dataclasses.replace(self, input_rows=rows)

    def to_dict(self):
        return {"id": self.id, "op_type": self.op_type, "params": dict(self.params),
                "input_rows": self.input_rows, "input_cols": self.input_cols}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), d["op_type"], d.get("params", {}),
                   d["input_rows"], int(d["input_cols"]))


@dataclass(frozen=True)
class ResourceUtilization:
    cpu: float = 0.0
    mem: float = 0.0
    io: float = 0.0

    def __post_init__(self):
        for name in ("cpu", "mem", "io"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"utilization {name}={v} outside [0, 1]")

    def as_tuple(self):
        return (self.cpu, self.mem, self.io)

    def of(self, resource) -> float:
        return {Resource.CPU: self.cpu, Resource.MEM: self.mem,
                Resource.IO: self.io}[Resource(resource)]

    def to_dict(self):
        return {"cpu": self.cpu, "mem": self.mem, "io": self.io}

    @classmethod
    def from_dict(cls, d):
        return cls(d["cpu"], d["mem"], d["io"])


COST_FIELDS = ("elapsed_time", "cpu_time", "cpu_cycles", "cpu_instructions",
               "cache_references", "cache_misses", "mem_avg", "mem_max",
               "io_blocks_read", "io_blocks_written")
SECONDS_FIELDS = frozenset({"elapsed_time", "cpu_time"})
# byte and block counts are stored as integers in traces
COUNT_FIELDS = tuple(f for f in COST_FIELDS if f not in SECONDS_FIELDS)


@dataclass(frozen=True)
class CostVector:
    elapsed_time: float = 0.0
    cpu_time: float = 0.0
    cpu_cycles: float = 0
    cpu_instructions: float = 0
    cache_references: float = 0
    cache_misses: float = 0
    mem_avg: float = 0
    mem_max: float = 0
    io_blocks_read: float = 0
    io_blocks_written: float = 0

    def violations(self):
        out = [f"{f} < 0" for f in COST_FIELDS if getattr(self, f) < 0]
        if self.cache_misses > self.cache_references:
            out.append("cache_misses > cache_references")
        if self.mem_avg > self.mem_max:
            out.append("mem_avg > mem_max")
        return out

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in COST_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "CostVector":
        return cls(*(float(x) for x in arr))

    def to_dict(self):
        return {f: (int(round(getattr(self, f))) if f in COUNT_FIELDS
                    else float(getattr(self, f))) for f in COST_FIELDS}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f: d[f] for f in COST_FIELDS})


@dataclass(frozen=True)
class CostRecord:
    """One operator's measured cost on one chunk."""

    record_id: int
    chunk_id: int
    rows: int
    cost: CostVector
    start: float = 0.0
    end: float = 0.0

    def to_dict(self):
        return {"record_id": self.record_id, "chunk_id": self.chunk_id, "rows": self.rows,
                "cost": self.cost.to_dict(), "start": self.start, "end": self.end}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["record_id"]), int(d["chunk_id"]), int(d["rows"]),
                   CostVector.from_dict(d["cost"]), d.get("start", 0.0), d.get("end", 0.0))


@dataclass(frozen=True)
class OperatorRecord:
    instance: OperatorInstance
    utilization: ResourceUtilization
    records: tuple = ()

    def to_dict(self):
        return {"instance": self.instance.to_dict(),
                "utilization": self.utilization.to_dict(),
                "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, d):
        return cls(OperatorInstance.from_dict(d["instance"]),
                   ResourceUtilization.from_dict(d["utilization"]),
                   tuple(CostRecord.from_dict(r) for r in d["records"]))


@dataclass(frozen=True)
class ChunkTrace:
    chunk_id: int
    transform_addr: tuple
    record_addr: tuple

    def __post_init__(self):
        object.__setattr__(self, "transform_addr", tuple(self.transform_addr))
        object.__setattr__(self, "record_addr", tuple(self.record_addr))

    def to_dict(self):
        return {"chunk_id": self.chunk_id, "transform_addr": list(self.transform_addr),
                "record_addr": list(self.record_addr)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["chunk_id"]), tuple(int(x) for x in d["transform_addr"]),
                   tuple(int(x) for x in d["record_addr"]))


class TraceMode(str, enum.Enum):
    FULL_COLLECTION = "FULL_COLLECTION"
    PROBE = "PROBE"


@dataclass(frozen=True)
class QueryTrace:
    query_id: str
    mode: TraceMode
    chunks: tuple
    operators: Mapping  # id -> OperatorRecord
    total_latency: float | None = None
    template_id: int = 0
    probe_budget: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", TraceMode(self.mode))
        object.__setattr__(self, "chunks", tuple(self.chunks))
        object.__setattr__(self, "operators", dict(self.operators))

    def with_latency(self, latency) -> "QueryTrace":
        return dataclasses.replace(self, total_latency=latency)

    def record_index(self):
        """record_id -> (operator_id, CostRecord)."""
        out = {}
        for op_id, rec in self.operators.items():
            for r in rec.records:
                out[r.record_id] = (op_id, r)
        return out

    def to_dict(self):
        return {
            "query_id": self.query_id,
            "mode": self.mode.value,
            "template_id": self.template_id,
            "total_latency": self.total_latency,
            "probe_budget": self.probe_budget,
            "chunks": [c.to_dict() for c in self.chunks],
            "operators": {str(k): v.to_dict() for k, v in sorted(self.operators.items())},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            query_id=d["query_id"],
            mode=TraceMode(d["mode"]),
            chunks=tuple(ChunkTrace.from_dict(c) for c in d["chunks"]),
            operators={int(k): OperatorRecord.from_dict(v) for k, v in d["operators"].items()},
            total_latency=d.get("total_latency"),
            template_id=d.get("template_id", 0),
            probe_budget=d.get("probe_budget"),
        )


def validate_trace(trace: QueryTrace, catalog: Catalog = DEFAULT_CATALOG) -> list[str]:
    """Return human-readable invariant violations; empty iff the trace is valid."""
    problems = []
    seen_ids = set()
    for op_id, rec in trace.operators.items():
        inst = rec.instance
        if inst.id != op_id:
            problems.append(f"operators[{op_id}]: instance id {inst.id} does not match key")
        if inst.id in seen_ids:
            problems.append(f"operators[{op_id}]: duplicate id")
        seen_ids.add(inst.id)
        if inst.op_type not in catalog:
            problems.append(f"operators[{op_id}]: unknown op_type {inst.op_type!r}")
        for r in rec.records:
            for v in r.cost.violations():
                problems.append(f"operators[{op_id}] record {r.record_id}: {v}")

    record_ids = set()
    for rec in trace.operators.values():
        for r in rec.records:
            record_ids.add(r.record_id)

    for chunk in trace.chunks:
        where = f"chunk {chunk.chunk_id}"
        if not chunk.transform_addr:
            problems.append(f"{where}: transform_addr is empty")
        if len(chunk.transform_addr) != len(chunk.record_addr):
            problems.append(f"{where}: transform_addr has {len(chunk.transform_addr)} entries "
                            f"but record_addr has {len(chunk.record_addr)}")
        for a, b in zip(chunk.transform_addr, chunk.transform_addr[1:]):
            if a == b:
                problems.append(f"{where}: transform_addr repeats operator {a} consecutively")
        for op_id in chunk.transform_addr:
            if op_id not in trace.operators:
                problems.append(f"{where}: transform_addr references unknown operator {op_id}")
        for rid in chunk.record_addr:
            if rid not in record_ids:
                problems.append(f"{where}: record_addr references unknown record {rid}")

    if trace.mode is TraceMode.PROBE and trace.probe_budget is not None:
        n_results = len(result_chunks(trace, catalog))
        if n_results > trace.probe_budget:
            problems.append(f"probe trace has {n_results} result chunks, "
                            f"budget is {trace.probe_budget}")
    if trace.total_latency is not None and not (math.isfinite(trace.total_latency)
                                                and trace.total_latency > 0):
        problems.append(f"total_latency must be positive, got {trace.total_latency}")
    return problems


def result_chunks(trace: QueryTrace, catalog: Catalog = DEFAULT_CATALOG):
    """Chunks whose path terminates at a Sink-typed operator."""
    out = []
    for c in trace.chunks:
        if not c.transform_addr:
            continue
        rec = trace.operators.get(c.transform_addr[-1])
        if rec is not None and rec.instance.op_type == "Sink":
            out.append(c)
    return out


# ------------------------------------------------------------------ JSONL io

def write_traces(path, traces: Iterable[QueryTrace]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_dict(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def iter_traces(path) -> Iterator[QueryTrace]:
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield QueryTrace.from_dict(json.loads(line))


def read_traces(path) -> list[QueryTrace]:
    return list(iter_traces(path))
