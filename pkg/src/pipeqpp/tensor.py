"""Small dense reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on the active :class:`Tape`; ``Tape.backward`` walks
the records in reverse and accumulates gradients into every tensor that
requires them.  Shapes are explicit: apart from scalar scaling there is no
broadcasting.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mse(matmul(x, w), y)
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "TapeError", "ShapeError", "parameter",
    "matmul", "add", "sub", "scale", "transpose", "row_softmax", "tanh",
    "leaky_relu", "mean", "mse", "concat", "index_select", "hadamard",
    "sum_all",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "tracked")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        # set on outputs recorded by a tape
        self.tracked = False

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(shape, rng: np.random.Generator, fan_in=None, name=None) -> Tensor:
    """Uniform init in [-sqrt(1/fan_in), sqrt(1/fan_in)]."""
    fan_in = fan_in if fan_in is not None else (shape[0] if len(shape) > 1 else 1)
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Tape:
    """Ordered record of operations with their backward rules.

    One backward pass per forward evaluation; the tape is spent afterwards.
    """

    def __init__(self):
        self.records = []
        self._spent = False

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out, inputs, backward):
        if self._spent:
            raise TapeError("tape already used for a backward pass")
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor, seed=None):
        if self._spent:
            raise TapeError("backward already run on this tape")
        if not any(r[0] is loss for r in self.records):
            raise TapeError("backward called before a forward pass produced the loss")
        grads = {id(loss): np.ones_like(loss.value) if seed is None
                 else np.asarray(seed, dtype=np.float64)}
        leaves = {}
        for out, inputs, rule in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gin in zip(inputs, rule(g)):
                if gin is None or not (inp.requires_grad or inp.tracked):
                    continue
                key = id(inp)
                grads[key] = grads[key] + gin if key in grads else gin
                if not inp.tracked:
                    leaves[key] = inp
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g
        self._spent = True
        self.records = []


def _emit(value, inputs, backward) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad or t.tracked for t in inputs):
        out.tracked = True
        tape.record(out, inputs, backward)
    return out


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.value.ndim == 2 and b.value.ndim == 2 and a.shape[1] == b.shape[0],
           f"matmul shapes {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"add shapes {a.shape} vs {b.shape}")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"sub shapes {a.shape} vs {b.shape}")
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"hadamard shapes {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, s) -> Tensor:
    """Multiply by a scalar; ``s`` may be a float or a one-element Tensor."""
    a = as_tensor(a)
    if isinstance(s, Tensor):
        _check(s.value.size == 1, f"scale factor must have one element, got {s.shape}")
        av, sv = a.value, s.value
        k = float(sv.reshape(()))
        return _emit(av * k, (a, s),
                     lambda g: (g * k, np.full(sv.shape, float(np.sum(g * av)))))
    k = float(s)
    return _emit(a.value * k, (a,), lambda g: (g * k,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    _check(a.value.ndim == 2, "transpose needs a matrix")
    return _emit(a.value.T.copy(), (a,), lambda g: (g.T,))


def row_softmax(a) -> Tensor:
    a = as_tensor(a)
    _check(a.value.ndim == 2, "row_softmax needs a matrix")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _emit(y, (a,), lambda g: (y * (g - np.sum(g * y, axis=1, keepdims=True)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(a, slope=0.01) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    d = np.where(pos, 1.0, slope)
    return _emit(a.value * d, (a,), lambda g: (g * d,))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.value.size
    _check(n > 0, "mean of empty tensor")
    return _emit(np.array(a.value.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.array(a.value.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _check(pred.shape == target.shape, f"mse shapes {pred.shape} vs {target.shape}")
    diff = pred.value - target.value
    n = diff.size
    _check(n > 0, "mse of empty tensors")
    return _emit(np.array(np.mean(diff * diff)), (pred, target),
                 lambda g: (2.0 * float(g) * diff / n, -2.0 * float(g) * diff / n))


def concat(tensors, axis=1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    _check(len(ts) > 0, "concat of nothing")
    _check(all(t.value.ndim == 2 for t in ts), "concat needs matrices")
    other = 1 - axis
    _check(len({t.shape[other] for t in ts}) == 1, "concat shapes disagree off-axis")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.value for t in ts], axis=axis), tuple(ts),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def index_select(a, index) -> Tensor:
    """Gather rows of ``a``; backward scatter-adds into the source rows."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    _check(a.value.ndim == 2 and idx.ndim == 1, "index_select needs a matrix and a 1-d index")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(a.value[idx], (a,), back)
