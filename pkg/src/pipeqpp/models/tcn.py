"""Tree convolution with continuous-binary-tree filter coefficients."""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from .layers import MLP, ones_column

WINDOW_DEPTH = 2


def tcn_coefficients(d_i, d, p_i, n):
    """(eta_t, eta_l, eta_r) for a node at depth ``d_i`` of a ``d``-deep window.

    ``d_i`` counts from the bottom of the window (the top node has d_i = d);
    ``p_i`` is the 1-based sibling position among ``n`` siblings.  A
    one-level window gives eta_t = 1 and a single child gives eta_r = 0.
    """
    if not (1 <= d_i <= d) or not (1 <= p_i <= n):
        raise ValueError(f"coefficients need 1 <= d_i <= d and 1 <= p_i <= n, "
                         f"got d_i={d_i}, d={d}, p_i={p_i}, n={n}")
    eta_t = 1.0 if d == 1 else (d_i - 1) / (d - 1)
    eta_r = 0.0 if n == 1 else (1.0 - eta_t) * (p_i - 1) / (n - 1)
    eta_l = (1.0 - eta_t) * (1.0 - eta_r)
    return eta_t, eta_l, eta_r


def coefficient_matrices(children, n_nodes, offset=0, out=None):
    """Left/right child-coefficient matrices for depth-2 windows.

    ``children[i]`` lists the node indices of i's children in order.  Row i
    of C_l (C_r) holds eta_l (eta_r) of each child of i; the window top has
    coefficient (1, 0, 0) so its own term is just ``X @ W_t``.
    """
    if out is None:
        out = (np.zeros((n_nodes, n_nodes)), np.zeros((n_nodes, n_nodes)))
    c_l, c_r = out
    for i, kids in enumerate(children):
        for p, j in enumerate(kids, start=1):
            _, el, er = tcn_coefficients(1, WINDOW_DEPTH, p, len(kids))
            c_l[offset + i, offset + j] = el
            c_r[offset + i, offset + j] = er
    return c_l, c_r


class TcnLayer:
    def __init__(self, width, rng, name="tcn"):
        self.W_t = T.parameter((width, width), rng, fan_in=3 * width, name=f"{name}.W_t")
        self.W_l = T.parameter((width, width), rng, fan_in=3 * width, name=f"{name}.W_l")
        self.W_r = T.parameter((width, width), rng, fan_in=3 * width, name=f"{name}.W_r")
        self.b = T.parameter((1, width), rng, fan_in=3 * width, name=f"{name}.b")

    def __call__(self, x, c_l, c_r):
        # sum over window members of (eta_t W_t + eta_l W_l + eta_r W_r) x_i
        n = x.shape[0]
        conv = T.add(T.matmul(x, self.W_t),
                     T.add(T.matmul(T.matmul(c_l, x), self.W_l),
                           T.matmul(T.matmul(c_r, x), self.W_r)))
        y = T.tanh(T.add(conv, T.matmul(ones_column(n), self.b)))
        return T.add(x, y)

    def parameters(self):
        return [self.W_t, self.W_l, self.W_r, self.b]


class TcnPredictor:
    """Three tree-convolution layers, then a readout FFN on the root vector."""

    def __init__(self, width, rng, layers=3, readout_hidden=None):
        self.layers = [TcnLayer(width, rng, f"tcn.l{i}") for i in range(layers)]
        self.readout = MLP([width, readout_hidden or width, 1], rng, name="tcn.readout")

    def __call__(self, x, c_l, c_r, roots):
        x = T.as_tensor(x)
        if x.shape[0] == 0:
            raise ValueError("tree convolution over an empty tree")
        c_l, c_r = T.as_tensor(c_l), T.as_tensor(c_r)
        for layer in self.layers:
            x = layer(x, c_l, c_r)
        return self.readout(T.index_select(x, roots))

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()] + self.readout.parameters()
