"""
Dynamic pipelines, data-flow trees and resource competition
===========================================================

When an operator is swapped at run time (a hash join replaced by a sort-merge
join, say) chunks processed before and after the swap follow different paths.
Merging those paths into one tree keeps both variants side by side. From that
tree we derive which nodes compete for CPU, memory and IO.

Run with ``python notebooks/02_dataflow_and_contention.py``.
"""

# %%
import numpy as np

from pipeqpp.contention import FusionWeights, build_contention_graph
from pipeqpp.dataflow import tree_from_trace
from pipeqpp.domain import OperatorInstance as Op
from pipeqpp.tracesim import (Action, CostGroundTruthModel, ModificationEvent, PipelineSpec,
                              execute_probe)

nodes = [Op(0, "Scan", {}, 8192, 2), Op(1, "Filter", {"selectivity": 1.0}, 8192, 2),
         Op(2, "Scan", {}, 8192, 2), Op(3, "Filter", {"selectivity": 1.0}, 8192, 2),
         Op(4, "HashJoin", {"match_ratio": 1.0}, 16384, 4), Op(5, "Sink", {}, 16384, 4)]
switch = ModificationEvent(1, Action.REPLACE_JOIN_ALGO, (4,),
                           (Op(6, "MergeSort", {}, 8192, 2), Op(7, "MergeSort", {}, 8192, 2),
                            Op(8, "MergeJoin", {}, 16384, 4)))
spec = PipelineSpec("join", nodes, [(0, 1), (1, 4), (2, 3), (3, 4), (4, 5)],
                    modifications=[switch])

# %% [markdown]
# The join is replaced after the first result chunk. A probe of three chunks
# sees both the original and the replacement plan.

# %%
trace = execute_probe(spec, CostGroundTruthModel(), seed=0, probe_chunks=3)
tree = tree_from_trace(trace)
for shape in sorted(tree.path_shapes()):
    print(" -> ".join(shape))

# %% [markdown]
# Each node gets a row in three competition matrices, one per resource. The
# raw matrices mark every pair of nodes bound to the same resource. An
# attention step reweights them by how close the nodes are in the tree, and a
# learned weighted sum with the tree adjacency gives the pipeline matrix.

# %%
np.set_printoptions(precision=2, suppress=True)
g = build_contention_graph(tree, FusionWeights(1.0, 0.5, 0.5, 0.5))
print("node types:", [n.op_type for n in tree.nodes])
print("CPU competition (raw):\n", g.expanded[0])
print("CPU competition (attention adjusted):\n", g.adjusted[0])
print("fused pipeline matrix:\n", g.m_pipeline)
