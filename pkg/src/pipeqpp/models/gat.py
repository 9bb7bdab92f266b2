"""Graph-attention calibrator over the fused pipeline matrix."""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from .layers import Linear, ones_column

NEG_INF = -1e30


def symmetrize(m) -> T.Tensor:
    m = T.as_tensor(m)
    return T.scale(T.add(m, T.transpose(m)), 0.5)


def neighborhood_mask(*structures) -> np.ndarray:
    """Nonzero pattern of the given N x N matrices and their transposes, plus self-loops."""
    n = np.asarray(structures[0]).shape[0]
    mask = np.eye(n, dtype=bool)
    for s in structures:
        s = np.asarray(s)
        mask |= (s != 0) | (s.T != 0)
    return mask


class GatLayer:
    """One attention layer with ``heads`` heads averaged together.

    logit_ij = leaky_relu(a_src.z_i + a_dst.z_j, 0.2) + E_ij over the masked
    neighborhood of i, where E is the symmetrized pipeline matrix.  Output is
    ``h + leaky_relu(attn @ z)`` (residual).
    """

    def __init__(self, width, rng, heads=1, name="gat"):
        self.heads = []
        for k in range(heads):
            W = T.parameter((width, width), rng, fan_in=width, name=f"{name}.h{k}.W")
            a_src = T.parameter((width, 1), rng, fan_in=width, name=f"{name}.h{k}.a_src")
            a_dst = T.parameter((width, 1), rng, fan_in=width, name=f"{name}.h{k}.a_dst")
            self.heads.append((W, a_src, a_dst))

    def attention(self, h, edge_bias, mask_bias, head=0):
        W, a_src, a_dst = self.heads[head]
        n = h.shape[0]
        z = T.matmul(h, W)
        src = T.matmul(T.matmul(z, a_src), T.Tensor(np.ones((1, n))))
        dst = T.matmul(ones_column(n), T.transpose(T.matmul(z, a_dst)))
        logits = T.add(T.add(T.leaky_relu(T.add(src, dst), 0.2), edge_bias), mask_bias)
        return z, T.row_softmax(logits)

    def __call__(self, h, edge_bias, mask_bias):
        out = None
        for k in range(len(self.heads)):
            z, attn = self.attention(h, edge_bias, mask_bias, k)
            msg = T.matmul(attn, z)
            out = msg if out is None else T.add(out, msg)
        if len(self.heads) > 1:
            out = T.scale(out, 1.0 / len(self.heads))
        return T.add(h, T.leaky_relu(out))

    def parameters(self):
        return [p for head in self.heads for p in head]


class GatCalibrator:
    """Maps cost and vertex features to a shared width, then two attention layers."""

    def __init__(self, cost_dim, vertex_dim, width, rng, heads=1, layers=2):
        self.cost_map = Linear(cost_dim, width, rng, "gat.cost_map")
        self.vertex_map = Linear(vertex_dim, width, rng, "gat.vertex_map")
        self.layers = [GatLayer(width, rng, heads, f"gat.l{i}") for i in range(layers)]
        self.width = width

    def embed(self, cost_x, vertex_x):
        return T.add(T.leaky_relu(self.cost_map(cost_x)), T.leaky_relu(self.vertex_map(vertex_x)))

    def __call__(self, cost_x, vertex_x, m_pipeline, mask=None):
        m_pipeline = T.as_tensor(m_pipeline)
        n = m_pipeline.shape[0]
        if T.as_tensor(cost_x).shape[0] != n or T.as_tensor(vertex_x).shape[0] != n:
            raise T.ShapeError("feature rows must match the pipeline matrix size")
        if mask is None:
            mask = neighborhood_mask(m_pipeline.value)
        mask_bias = T.Tensor(np.where(mask, 0.0, NEG_INF))
        edge_bias = symmetrize(m_pipeline)
        h = self.embed(cost_x, vertex_x)
        for layer in self.layers:
            h = layer(h, edge_bias, mask_bias)
        return h

    def attention_maps(self, cost_x, vertex_x, m_pipeline, mask=None):
        """Per-layer attention matrices of head 0 (for inspection and tests)."""
        m_pipeline = T.as_tensor(m_pipeline)
        if mask is None:
            mask = neighborhood_mask(m_pipeline.value)
        mask_bias = T.Tensor(np.where(mask, 0.0, NEG_INF))
        edge_bias = symmetrize(m_pipeline)
        h = self.embed(cost_x, vertex_x)
        maps = []
        for layer in self.layers:
            maps.append(layer.attention(h, edge_bias, mask_bias)[1].value)
            h = layer(h, edge_bias, mask_bias)
        return maps

    def parameters(self):
        return (self.cost_map.parameters() + self.vertex_map.parameters()
                + [p for layer in self.layers for p in layer.parameters()])
