"""Dense layers built on the autodiff primitives."""
from __future__ import annotations

import numpy as np

from .. import tensor as T


def ones_column(n):
    return T.Tensor(np.ones((n, 1)))


class Linear:
    def __init__(self, n_in, n_out, rng, name="linear"):
        self.W = T.parameter((n_in, n_out), rng, fan_in=n_in, name=f"{name}.W")
        self.b = T.parameter((1, n_out), rng, fan_in=n_in, name=f"{name}.b")

    def __call__(self, x):
        x = T.as_tensor(x)
        return T.add(T.matmul(x, self.W), T.matmul(ones_column(x.shape[0]), self.b))

    def parameters(self):
        return [self.W, self.b]


class MLP:
    """Stack of Linear layers with leaky-ReLU between them (none after the last)."""

    def __init__(self, sizes, rng, name="mlp"):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.layers = [Linear(a, b, rng, f"{name}.{i}") for i, (a, b) in
                       enumerate(zip(sizes, sizes[1:]))]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.leaky_relu(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


def named_parameters(obj, prefix):
    """Stable (name, tensor) list; names come from parameter creation."""
    return [(f"{prefix}/{p.name}", p) for p in obj.parameters()]
