"""Resource-competition matrices, attention adjustment and pipeline fusion.

For a data-flow tree with N nodes::

    M'r  = rowsoftmax(Mr_F @ M_F.T / sqrt(N)) @ Mr_F          (per resource r)
    M_pipeline = w_F*M_F + w_c*M'c + w_m*M'm + w_io*M'io
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .domain import DEFAULT_CATALOG, RESOURCES, Catalog, Resource


@dataclass(frozen=True)
class MetaCompetitionMatrices:
    """Binary type-by-type matrices, one per resource, in catalog order."""

    by_resource: dict

    @property
    def Mc(self):
        return self.by_resource[Resource.CPU]

    @property
    def Mm(self):
        return self.by_resource[Resource.MEM]

    @property
    def Mio(self):
        return self.by_resource[Resource.IO]


def build_meta_matrices(catalog: Catalog = DEFAULT_CATALOG) -> MetaCompetitionMatrices:
    types = list(catalog)
    if not types:
        raise ValueError("catalog is empty")
    out = {}
    for r in RESOURCES:
        bound = np.array([1.0 if t.bound_to(r) else 0.0 for t in types])
        out[r] = np.outer(bound, bound)
    return MetaCompetitionMatrices(out)


def expand_to_pipeline(meta: MetaCompetitionMatrices, op_types, catalog: Catalog = DEFAULT_CATALOG):
    """Per-resource N x N matrices indexed by the node order of ``op_types``.

    ``op_types`` is the list of node type names (or a DataFlowTree).
    """
    if hasattr(op_types, "nodes"):
        op_types = [n.op_type for n in op_types.nodes]
    idx = []
    for t in op_types:
        if t not in catalog:
            raise KeyError(f"operator type {t!r} is not in the catalog")
        idx.append(catalog.index(t))
    idx = np.array(idx, dtype=np.int64)
    return tuple(meta.by_resource[r][np.ix_(idx, idx)] for r in RESOURCES)


def attention_adjust(mr_f, m_f) -> T.Tensor:
    """Competition matrix re-weighted by attention against the data-flow adjacency."""
    mr_f, m_f = T.as_tensor(mr_f), T.as_tensor(m_f)
    n = mr_f.shape[0]
    if n == 0:
        raise ValueError("attention over an empty pipeline")
    if mr_f.shape != (n, n) or m_f.shape != (n, n):
        raise T.ShapeError(f"attention needs two N x N matrices, got {mr_f.shape}, {m_f.shape}")
    scores = T.scale(T.matmul(mr_f, T.transpose(m_f)), 1.0 / np.sqrt(n))
    return T.matmul(T.row_softmax(scores), mr_f)


def attention_weights(mr_f, m_f) -> np.ndarray:
    mr_f, m_f = np.asarray(mr_f, float), np.asarray(m_f, float)
    n = mr_f.shape[0]
    return T.row_softmax(mr_f @ m_f.T / np.sqrt(n)).value


class FusionWeights:
    """The four learnable scalars w_F, w_c, w_m, w_io."""

    names = ("w_F", "w_c", "w_m", "w_io")

    def __init__(self, w_F=1.0, w_c=0.5, w_m=0.5, w_io=0.5):
        vals = (w_F, w_c, w_m, w_io)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("fusion weights must be finite")
        self.params = [T.Tensor(np.array([float(v)]), requires_grad=True, name=n)
                       for n, v in zip(self.names, vals)]

    def values(self):
        return tuple(float(p.value[0]) for p in self.params)

    def parameters(self):
        return list(self.params)


def fuse_pipeline(m_f, adjusted, weights) -> T.Tensor:
    """Weighted sum of the adjacency and the three adjusted competition matrices.

    ``weights`` is a FusionWeights or a 4-tuple of floats / one-element Tensors.
    """
    ws = weights.params if isinstance(weights, FusionWeights) else list(weights)
    mats = [T.as_tensor(m_f)] + [T.as_tensor(a) for a in adjusted]
    if len(mats) != 4 or len(ws) != 4:
        raise ValueError("fusion needs M_F, three adjusted matrices and four weights")
    shape = mats[0].shape
    for m in mats:
        if m.shape != shape or len(shape) != 2 or shape[0] != shape[1]:
            raise T.ShapeError(f"fusion matrices must all be N x N, got {m.shape} vs {shape}")
    out = T.scale(mats[0], ws[0])
    for m, w in zip(mats[1:], ws[1:]):
        out = T.add(out, T.scale(m, w))
    return out


@dataclass
class ContentionGraph:
    m_f: np.ndarray
    expanded: tuple
    adjusted: tuple
    m_pipeline: np.ndarray


def build_contention_graph(tree, weights=None, catalog: Catalog = DEFAULT_CATALOG,
                           use_attention=True) -> ContentionGraph:
    """All matrices of one tree, evaluated numerically (for inspection and dumps)."""
    from .dataflow import to_adjacency
    m_f = to_adjacency(tree)
    expanded = expand_to_pipeline(build_meta_matrices(catalog), tree, catalog)
    if use_attention:
        adjusted = tuple(attention_adjust(e, m_f).value for e in expanded)
    else:
        adjusted = expanded
    weights = weights or FusionWeights()
    fused = fuse_pipeline(m_f, adjusted, weights).value
    return ContentionGraph(m_f, expanded, adjusted, fused)
