"""
Simulating pipelines and reading their traces
=============================================

A query is a DAG of operators. Chunks of rows flow from the scans to the sink,
and each operator records what one chunk cost it. The simulator runs a spec in
three modes: serially (one operator at a time, uncontended costs), in parallel
(operators overlap and slow each other down) and as a probe (parallel, stopped
after the first few result chunks).

Run with ``python notebooks/01_simulator_and_traces.py``.
"""

# %%
from pipeqpp.dataflow import tree_from_trace
from pipeqpp.domain import validate_trace
from pipeqpp.tracesim import (CostGroundTruthModel, execute_parallel, execute_probe,
                              execute_serial, generate_workload, make_templates)

templates = make_templates(5, seed=2024)
spec = generate_workload(templates[2], 1, seed=2024)[0]
print(spec.query_id, "operators:", [(n.id, n.op_type) for n in spec.nodes])
print("edges:", spec.edges)

# %% [markdown]
# The serial run gives the uncontended cost of every operator on every chunk.
# These records are the training data for the per-operator cost predictors.

# %%
model = CostGroundTruthModel()
serial = execute_serial(spec, model, spec.seed)
for op_id, rec in sorted(serial.operators.items()):
    total = sum(r.cost.elapsed_time for r in rec.records)
    print(f"{op_id:>2} {rec.instance.op_type:<10} chunks={len(rec.records):>3} "
          f"elapsed={total * 1e3:.3f} ms")
print("trace problems:", validate_trace(serial))

# %% [markdown]
# In parallel mode concurrently active operators that share a resource slow
# each other down, so wall-clock latency is not the sum of serial costs.

# %%
parallel = execute_parallel(spec, model, spec.seed)
quiet = execute_parallel(spec, model.with_penalties(cpu=0, mem=0, io=0), spec.seed)
serial_sum = sum(r.cost.elapsed_time for rec in serial.operators.values() for r in rec.records)
print(f"serial work   {serial_sum * 1e3:.3f} ms")
print(f"parallel, no contention {quiet.total_latency * 1e3:.3f} ms")
print(f"parallel with contention {parallel.total_latency * 1e3:.3f} ms")

# %% [markdown]
# A probe run stops after a few result chunks. Every chunk remembers the
# operators it passed through, and merging those paths gives the data-flow
# tree that the latency model reads.

# %%
probe = execute_probe(spec, model, spec.seed, probe_chunks=8)
tree = tree_from_trace(probe)
print("probe chunks:", len(probe.chunks), "tree nodes:", tree.N)
for node in tree.nodes:
    print(f"  {node.op_type:<10} reached by {node.multiplicity} chunk(s)")
print(tree.to_dot())
