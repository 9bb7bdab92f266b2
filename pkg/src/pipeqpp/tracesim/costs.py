"""Hidden ground-truth cost model and background load of the simulator."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ..domain import (DEFAULT_CATALOG, RESOURCES, Catalog, CostVector, OperatorInstance,
                      Resource, ResourceUtilization)

CLOCK_HZ = 3.0e9


@dataclass(frozen=True)
class TypeCost:
    """Per-operator-type coefficients.

    Elapsed time of one chunk is
    ``(fixed_time + time_per_row*w + time_per_cell*w*(cols-1)) * param_factor``
    where ``w`` is the row count (``rows*log2(rows+2)`` for sorting types).
    The remaining cost components are derived from elapsed time and cells.
    """

    fixed_time: float
    time_per_row: float
    time_per_cell: float = 0.0
    nlogn: bool = False
    cpu_share: float = 0.9
    ipc: float = 1.5
    refs_per_instr: float = 0.05
    miss_ratio: float = 0.1
    mem_fixed: float = 64 * 1024
    mem_per_cell: float = 8.0
    mem_peak: float = 0.25
    io_read_per_cell: float = 0.0
    io_write_per_cell: float = 0.0
    # numeric param -> weight; factor = 1 + sum(weight * value)
    param_weights: dict = field(default_factory=dict)
    # "param=value" -> multiplier for categorical params
    category_factors: dict = field(default_factory=dict)

    def check(self, name=""):
        numeric = [f.name for f in dataclasses.fields(self)
                   if f.type in ("float", float) and f.name != "nlogn"]
        for f in numeric:
            if getattr(self, f) < 0:
                raise ValueError(f"{name}: coefficient {f} must be >= 0")
        if self.miss_ratio > 1 or self.cpu_share > 1:
            raise ValueError(f"{name}: ratios must be <= 1")
        for k, v in {**self.param_weights, **self.category_factors}.items():
            if v < 0:
                raise ValueError(f"{name}: weight {k} must be >= 0")


def _default_types():
    us, ns = 1e-6, 1e-9
    return {
        "Scan": TypeCost(20 * us, 30 * ns, 6 * ns, cpu_share=0.4, mem_per_cell=8,
                         io_read_per_cell=8 / 4096, category_factors={"format=parquet": 1.6}),
        "Filter": TypeCost(4 * us, 3 * ns, 0.5 * ns, param_weights={"n_predicates": 0.6},
                           category_factors={"predicate=like": 2.5, "predicate=range": 1.2},
                           mem_per_cell=1),
        "Expression": TypeCost(5 * us, 5 * ns, 0.5 * ns, param_weights={"n_exprs": 0.5},
                               mem_per_cell=4),
        "HashJoin": TypeCost(15 * us, 40 * ns, 3 * ns, param_weights={"n_keys": 0.3},
                             refs_per_instr=0.15, miss_ratio=0.35, mem_per_cell=24,
                             mem_peak=0.8),
        "MergeJoin": TypeCost(10 * us, 22 * ns, 2 * ns, param_weights={"n_keys": 0.2},
                              mem_per_cell=8),
        "MergeSort": TypeCost(12 * us, 6 * ns, 1 * ns, nlogn=True, param_weights={"n_keys": 0.25},
                              mem_per_cell=16, mem_peak=1.0, io_write_per_cell=2 / 4096),
        "PartialSort": TypeCost(8 * us, 4 * ns, 0.5 * ns, nlogn=True,
                                param_weights={"n_keys": 0.25}, mem_per_cell=12),
        "Aggregate": TypeCost(12 * us, 35 * ns, 2 * ns,
                              param_weights={"n_keys": 0.3, "n_aggs": 0.15},
                              category_factors={"method=two_level": 0.8},
                              refs_per_instr=0.12, miss_ratio=0.3, mem_per_cell=20,
                              mem_peak=0.6),
        "Exchange": TypeCost(6 * us, 8 * ns, 1 * ns, cpu_share=0.5,
                             param_weights={"n_partitions": 0.05}, mem_per_cell=16),
        "Limit": TypeCost(2 * us, 1 * ns, 0.0, mem_per_cell=0.5),
        "Sink": TypeCost(8 * us, 6 * ns, 1 * ns, cpu_share=0.3, mem_per_cell=4,
                         io_write_per_cell=8 / 4096),
    }


@dataclass(frozen=True)
class CostGroundTruthModel:
    types: dict = field(default_factory=_default_types)
    # multiplicative slowdown per extra concurrently active operator on a resource
    penalties: dict = field(default_factory=lambda: {Resource.CPU: 0.35, Resource.MEM: 0.25,
                                                     Resource.IO: 0.45})
    noise: float = 0.03
    util_sensitivity: float = 0.6
    catalog: Catalog = DEFAULT_CATALOG

    def __post_init__(self):
        object.__setattr__(self, "penalties",
                           {Resource(k): float(v) for k, v in self.penalties.items()})
        for name, tc in self.types.items():
            tc.check(name)
        if self.noise < 0:
            raise ValueError("noise scale must be >= 0")
        if any(v < 0 for v in self.penalties.values()):
            raise ValueError("contention penalties must be >= 0")

    def with_penalties(self, **kw) -> "CostGroundTruthModel":
        pen = dict(self.penalties)
        for k, v in kw.items():
            pen[Resource(k.upper())] = v
        return dataclasses.replace(self, penalties=pen)

    def scaled(self, op_type, **factors) -> "CostGroundTruthModel":
        """Copy with selected coefficients of one type multiplied."""
        tc = self.types[op_type]
        tc = dataclasses.replace(tc, **{k: getattr(tc, k) * v for k, v in factors.items()})
        return dataclasses.replace(self, types={**self.types, op_type: tc})

    def elapsed(self, inst: OperatorInstance, rows: int, util: ResourceUtilization,
                noise_mult: float = 1.0) -> float:
        tc = self.types[inst.op_type]
        w = rows * math.log2(rows + 2) if tc.nlogn else rows
        base = tc.fixed_time + tc.time_per_row * w + tc.time_per_cell * w * (inst.input_cols - 1)
        return base * self._param_factor(tc, inst) * self._util_factor(inst, util) * noise_mult

    def chunk_cost(self, inst: OperatorInstance, rows: int, util: ResourceUtilization,
                   noise_mult: float = 1.0, elapsed=None) -> CostVector:
        """Uncontended cost of ``inst`` on one chunk; ``elapsed`` overrides wall time."""
        tc = self.types[inst.op_type]
        base_elapsed = self.elapsed(inst, rows, util, noise_mult)
        cpu_time = base_elapsed * tc.cpu_share
        cycles = round(cpu_time * CLOCK_HZ)
        instructions = round(cycles * tc.ipc)
        refs = round(instructions * tc.refs_per_instr)
        misses = min(refs, round(refs * tc.miss_ratio))
        cells = rows * inst.input_cols
        mem_avg = round(tc.mem_fixed + tc.mem_per_cell * cells)
        mem_max = round(mem_avg * (1.0 + tc.mem_peak))
        return CostVector(
            elapsed_time=base_elapsed if elapsed is None else elapsed,
            cpu_time=cpu_time,
            cpu_cycles=cycles,
            cpu_instructions=instructions,
            cache_references=refs,
            cache_misses=misses,
            mem_avg=mem_avg,
            mem_max=max(mem_avg, mem_max),
            io_blocks_read=round(tc.io_read_per_cell * cells),
            io_blocks_written=round(tc.io_write_per_cell * cells),
        )

    def operator_cost(self, inst: OperatorInstance, util: ResourceUtilization,
                      chunk_rows: int = 1024) -> CostVector:
        """Noise-free uncontended cost of processing ``inst.input_rows`` rows."""
        from .pipeline import source_chunk_rows
        chunks = source_chunk_rows(inst.input_rows, chunk_rows) or [0]
        return aggregate_costs([self.chunk_cost(inst, r, util) for r in chunks])

    def _param_factor(self, tc: TypeCost, inst: OperatorInstance) -> float:
        f = 1.0 + sum(w * float(inst.params.get(k, 0.0)) for k, w in tc.param_weights.items())
        for key, mult in tc.category_factors.items():
            pname, _, pval = key.partition("=")
            if str(inst.params.get(pname)) == pval:
                f *= mult
        return f

    def _util_factor(self, inst, util) -> float:
        bound = self.catalog[inst.op_type].bound_resources
        load = sum(util.of(r) for r in bound) / len(bound)
        return 1.0 + self.util_sensitivity * load

    def to_dict(self):
        return {"noise": self.noise, "util_sensitivity": self.util_sensitivity,
                "penalties": {r.value: v for r, v in self.penalties.items()},
                "types": {k: dataclasses.asdict(v) for k, v in sorted(self.types.items())}}

    @classmethod
    def from_dict(cls, d):
        base = cls()
        types = dict(base.types)
        for k, v in (d.get("types") or {}).items():
            types[k] = dataclasses.replace(types[k], **v) if k in types else TypeCost(**v)
        return cls(types=types,
                   penalties=d.get("penalties", {r.value: v for r, v in base.penalties.items()}),
                   noise=d.get("noise", base.noise),
                   util_sensitivity=d.get("util_sensitivity", base.util_sensitivity))


def aggregate_costs(costs) -> CostVector:
    """Operator-level cost from its per-chunk costs (sums, mean/max memory)."""
    arr = np.array([c.to_array() for c in costs])
    if arr.size == 0:
        return CostVector()
    total = arr.sum(axis=0)
    total[6] = arr[:, 6].mean()
    total[7] = arr[:, 7].max()
    return CostVector.from_array(total)


@dataclass(frozen=True)
class BackgroundLoad:
    """Seeded generator of pre-execution system utilization.

    ``level`` 0 is an idle machine, 1 (or more) a saturated one.
    """

    level: float
    seed: int = 0
    jitter: float = 0.5

    def snapshot(self, key: int = 0) -> ResourceUtilization:
        return snapshot_utilization(self, key)


def snapshot_utilization(load: BackgroundLoad, key: int = 0) -> ResourceUtilization:
    level = float(load.level)
    if level <= 0:
        return ResourceUtilization(0.0, 0.0, 0.0)
    if level >= 1:
        return ResourceUtilization(1.0, 1.0, 1.0)
    rng = np.random.default_rng([int(load.seed) & 0xFFFFFFFF, int(key) & 0xFFFFFFFF])
    spread = load.jitter * min(level, 1.0 - level)
    vals = np.clip(level + spread * rng.uniform(-1.0, 1.0, size=len(RESOURCES)), 0.0, 1.0)
    return ResourceUtilization(*(float(v) for v in vals))
