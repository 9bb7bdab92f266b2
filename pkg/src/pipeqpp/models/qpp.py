"""Query graphs, the full model bundle and end-to-end latency prediction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..contention import (FusionWeights, attention_adjust, build_meta_matrices,
                          expand_to_pipeline, fuse_pipeline)
from ..dataflow import to_adjacency, tree_from_trace
from ..domain import DEFAULT_CATALOG, Catalog, QueryTrace
from .encoding import FeatureEncoder, operator_features
from .gat import GatCalibrator, neighborhood_mask
from .ocp import OcpModel
from .tcn import TcnPredictor, coefficient_matrices

FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    ocp_hidden: tuple = (64, 64, 64)
    width: int = 32
    gat_heads: int = 1
    gat_layers: int = 2
    tcn_layers: int = 3

    def to_dict(self):
        return {"ocp_hidden": list(self.ocp_hidden), "width": self.width,
                "gat_heads": self.gat_heads, "gat_layers": self.gat_layers,
                "tcn_layers": self.tcn_layers}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "ocp_hidden" in d:
            d["ocp_hidden"] = tuple(d["ocp_hidden"])
        return cls(**d)


@dataclass
class Ablation:
    no_res_attn: bool = False
    no_ocp: bool = False

    def to_dict(self):
        return {"no_res_attn": self.no_res_attn, "no_ocp": self.no_ocp}


# ------------------------------------------------------------ graph building

def subtree_sizes(tree):
    sizes = [1] * tree.N
    for i, kids in reversed(list(enumerate(tree.children_index()))):
        sizes[i] += sum(sizes[j] for j in kids)
    return sizes


def node_raw_features(trace: QueryTrace, tree, catalog=DEFAULT_CATALOG):
    """Per-node raw operator features and vertex-only extras, in tree order."""
    ops, extras, calls = [], [], []
    depths = tree.depths()
    sizes = subtree_sizes(tree)
    for k, node in enumerate(tree.nodes):
        rec = trace.operators[node.operator_id]
        inst, util = rec.instance, rec.utilization
        calls.append((inst, util))
        ops.append(operator_features(inst, util, catalog=catalog))
        extras.append({
            "op_type": inst.op_type,
            "log_dop": math.log(max(1, int(inst.params.get("dop", 1)))),
            "log_mult": math.log1p(node.multiplicity),
            "mult_frac": node.multiplicity / tree.n_paths,
            "n_children": float(len(node.children)),
            "depth": float(depths[k]),
            "log_subtree": math.log(sizes[k]),
        })
    return ops, extras, calls


def vertex_sample(op_feats, extra):
    return {**{f"op_{k}": v for k, v in op_feats.items()}, **extra}


@dataclass
class QueryGraph:
    """Everything the calibrator and summarizer need for one query, as constants."""

    query_id: str
    template_id: int
    n: int
    m_f: np.ndarray
    adjusted: tuple
    mask: np.ndarray
    children: list
    cost_x: np.ndarray
    vertex_x: np.ndarray
    latency: float | None = None
    ocp_elapsed: float = 0.0
    op_types: list = field(default_factory=list)


def competition_inputs(tree, use_attention, catalog=DEFAULT_CATALOG):
    m_f = to_adjacency(tree)
    expanded = expand_to_pipeline(build_meta_matrices(catalog), tree, catalog)
    if use_attention:
        adjusted = tuple(attention_adjust(e, m_f).value for e in expanded)
    else:
        adjusted = tuple(expanded)
    return m_f, adjusted


def build_graph(trace: QueryTrace, bundle, tree=None) -> QueryGraph:
    catalog = bundle.catalog
    tree = tree or tree_from_trace(trace, catalog)
    ops, extras, calls = node_raw_features(trace, tree, catalog)
    if bundle.ablation.no_ocp:
        cost_x = bundle.raw_encoder.encode_many(ops)
        elapsed = 0.0
    else:
        costs = bundle.ocp.predict_many(calls)
        cost_x = bundle.ocp.pooled_scaler.transform(costs)
        # each distinct operator counted once
        seen = {}
        for node, c in zip(tree.nodes, costs):
            seen.setdefault(node.operator_id, c[0])
        elapsed = float(sum(seen.values()))
    vertex_x = bundle.vertex_encoder.encode_many(
        [vertex_sample(o, e) for o, e in zip(ops, extras)])
    m_f, adjusted = competition_inputs(tree, not bundle.ablation.no_res_attn, catalog)
    mask = neighborhood_mask(m_f, *adjusted)
    return QueryGraph(trace.query_id, trace.template_id, tree.N, m_f, adjusted, mask,
                      tree.children_index(), cost_x, vertex_x, trace.total_latency,
                      elapsed, [n.op_type for n in tree.nodes])


@dataclass
class GraphBatch:
    """Block-diagonal union of several query graphs."""

    m_f: np.ndarray
    adjusted: tuple
    mask: np.ndarray
    c_l: np.ndarray
    c_r: np.ndarray
    cost_x: np.ndarray
    vertex_x: np.ndarray
    roots: np.ndarray
    size: int


def collate(graphs) -> GraphBatch:
    graphs = list(graphs)
    if not graphs:
        raise ValueError("cannot batch zero graphs")
    total = sum(g.n for g in graphs)
    m_f = np.zeros((total, total))
    adjusted = tuple(np.zeros((total, total)) for _ in range(3))
    mask = np.zeros((total, total), dtype=bool)
    c_l, c_r = np.zeros((total, total)), np.zeros((total, total))
    roots, off = [], 0
    for g in graphs:
        sl = slice(off, off + g.n)
        m_f[sl, sl] = g.m_f
        for a, ga in zip(adjusted, g.adjusted):
            a[sl, sl] = ga
        mask[sl, sl] = g.mask
        coefficient_matrices(g.children, g.n, off, (c_l, c_r))
        roots.append(off)
        off += g.n
    return GraphBatch(m_f, adjusted, mask, c_l, c_r,
                      np.vstack([g.cost_x for g in graphs]),
                      np.vstack([g.vertex_x for g in graphs]),
                      np.array(roots, dtype=np.int64), len(graphs))


# ------------------------------------------------------------ the bundle

class ModelBundle:
    """All learned state: OCPs, encoders, fusion weights, GAT, TCN, label stats."""

    def __init__(self, vertex_encoder: FeatureEncoder, ocp: OcpModel | None = None,
                 raw_encoder: FeatureEncoder | None = None, config: ModelConfig | None = None,
                 ablation: Ablation | None = None, seed: int = 0,
                 catalog: Catalog = DEFAULT_CATALOG, label_stats=(0.0, 1.0), meta=None):
        self.catalog = catalog
        self.config = config or ModelConfig()
        self.ablation = ablation or Ablation()
        if not self.ablation.no_ocp and ocp is None:
            raise ValueError("a bundle without cost predictors needs the no_ocp ablation")
        if self.ablation.no_ocp and raw_encoder is None:
            raise ValueError("the no_ocp ablation needs a raw operator feature encoder")
        self.ocp = ocp
        self.raw_encoder = raw_encoder
        self.vertex_encoder = vertex_encoder
        self.label_stats = tuple(float(v) for v in label_stats)
        self.seed = seed
        self.meta = dict(meta or {})
        rng = np.random.default_rng([seed, 2])
        from .ocp import N_COST
        cost_dim = raw_encoder.width if self.ablation.no_ocp else N_COST
        w = self.config.width
        self.fusion = FusionWeights()
        self.gat = GatCalibrator(cost_dim, vertex_encoder.width, w, rng,
                                 heads=self.config.gat_heads, layers=self.config.gat_layers)
        self.tcn = TcnPredictor(w, rng, layers=self.config.tcn_layers)

    def qpp_parameters(self):
        return self.fusion.parameters() + self.gat.parameters() + self.tcn.parameters()

    def forward(self, batch: GraphBatch) -> T.Tensor:
        """Normalized latency predictions, one row per graph."""
        m_pipe = fuse_pipeline(batch.m_f, batch.adjusted, self.fusion)
        h = self.gat(batch.cost_x, batch.vertex_x, m_pipe, batch.mask)
        return self.tcn(h, batch.c_l, batch.c_r, batch.roots)

    def normalize_latency(self, seconds):
        mu, sd = self.label_stats
        return (np.log(np.asarray(seconds, dtype=np.float64)) - mu) / sd

    def denormalize_latency(self, z):
        mu, sd = self.label_stats
        return np.exp(np.asarray(z, dtype=np.float64) * sd + mu)

    def predict_graphs(self, graphs, batch_size=64) -> np.ndarray:
        out = []
        for i in range(0, len(graphs), batch_size):
            out.append(self.forward(collate(graphs[i:i + batch_size])).value[:, 0])
        return self.denormalize_latency(np.concatenate(out)) if out else np.zeros(0)

    def save(self, path):
        from .checkpoint import save_bundle
        save_bundle(self, path)

    @classmethod
    def load(cls, path):
        from .checkpoint import load_bundle
        return load_bundle(path)


def predict_query(trace: QueryTrace, bundle: ModelBundle) -> float:
    """Latency in seconds for one probe or full-collection trace."""
    g = build_graph(trace, bundle)
    return float(bundle.predict_graphs([g])[0])
