"""Minimal reverse-mode autodiff on float64 numpy buffers.

Covers exactly what the distance model needs: dense layers with ReLU,
elementwise math, concatenation, full-sum reduction, and row gather/scatter
for message passing. Every operation whose inputs require gradients records
parent links and a backward closure on its output; `backward` replays the
recording once in reverse topological order. An Adam optimizer and a JSON
checkpoint container round the module off.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import DomainError


class ShapeError(DomainError):
    """Operand shapes do not satisfy an operation's contract."""


class Tensor:
    """A float64 array plus autodiff bookkeeping.

    After `backward`, every reachable tensor with `requires_grad` holds the
    accumulated gradient of the scalar loss in `grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple["Tensor", ...] = ()
        self._grad_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g, dtype=np.float64), t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data**2))

    return _result(a.data / b.data, (a, b), grad_fn)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def grad_fn(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects two matrices")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")

    def grad_fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), grad_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0

    def grad_fn(g):
        _accumulate(x, g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), grad_fn)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.exp(x.data)

    def grad_fn(g):
        _accumulate(x, g * out_data)

    return _result(out_data, (x,), grad_fn)


def log(x) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g):
        _accumulate(x, g / x.data)

    return _result(np.log(x.data), (x,), grad_fn)


def square(x) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g):
        _accumulate(x, 2.0 * g * x.data)

    return _result(x.data**2, (x,), grad_fn)


def clip(x, floor: float, ceiling: float = math.inf) -> Tensor:
    """Clamp to [floor, ceiling]; gradient is zero where a clamp is active."""
    x = _as_tensor(x)
    floor, ceiling = float(floor), float(ceiling)
    mask = (x.data > floor) & (x.data < ceiling)

    def grad_fn(g):
        _accumulate(x, g * mask)

    return _result(np.clip(x.data, floor, ceiling), (x,), grad_fn)


def tsum(x) -> Tensor:
    """Sum over all entries, producing a scalar tensor."""
    x = _as_tensor(x)

    def grad_fn(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _result(x.data.sum(), (x,), grad_fn)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(index)])

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), grad_fn)


def rows(x, index) -> Tensor:
    """Gather rows of a matrix by integer index (with repetition)."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError("rows expects a matrix")

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        _accumulate(x, gx)

    return _result(x.data[index], (x,), grad_fn)


def scatter_sum(x, index, size: int) -> Tensor:
    """Sum rows of `x` into `size` buckets selected by `index` (segment sum)."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError("scatter_sum expects a matrix")
    if index.shape[0] != x.data.shape[0]:
        raise ShapeError("scatter_sum index length must match the row count")
    out = np.zeros((int(size), x.data.shape[1]))
    np.add.at(out, index, x.data)

    def grad_fn(g):
        _accumulate(x, g[index])

    return _result(out, (x,), grad_fn)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into `grad` for every reachable tensor."""
    if loss.data.shape != ():
        raise ShapeError("backward needs a scalar loss")
    order: list[Tensor] = []
    visited = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, parents = stack[-1]
        nxt = next(parents, None)
        if nxt is None:
            order.append(node)
            stack.pop()
        elif id(nxt) not in visited:
            visited.add(id(nxt))
            stack.append((nxt, iter(nxt._parents)))
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


class Dense:
    """Affine layer with He-style uniform fan-in initialization.

    `gain` scales the init limit; small gains keep a network's initial
    outputs near zero.
    """

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 gain: float = 1.0):
        limit = gain * math.sqrt(6.0 / fan_in)
        self.weight = param(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        self.bias = param(np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Mlp:
    """Dense stack with ReLU between layers and a linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator, out_gain: float = 1.0):
        if len(sizes) < 2:
            raise ShapeError("an MLP needs at least input and output sizes")
        self.layers = [Dense(a, b, rng) for a, b in zip(sizes[:-2], sizes[1:-1])]
        self.layers.append(Dense(sizes[-2], sizes[-1], rng, gain=out_gain))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class Adam:
    """Adam with bias correction; defaults follow common practice."""

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        if grads is None:
            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in self.params
            ]
        if len(grads) != len(self.params):
            raise ShapeError("one gradient per parameter required")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ShapeError("gradient shape does not match its parameter")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.asarray(m, dtype=np.float64).copy() for m in state["m"]]
        self.v = [np.asarray(v, dtype=np.float64).copy() for v in state["v"]]
        for p, m, v in zip(self.params, self.m, self.v):
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ShapeError("optimizer state does not match parameters")


CHECKPOINT_FORMAT = "confgen-params"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict, extra: dict | None = None) -> None:
    """Write named parameter arrays (plus free-form metadata) as JSON.

    Floats are serialized with shortest round-trip precision, so a load
    reproduces every value bit for bit.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {
                "shape": list(np.asarray(a).shape),
                "data": np.asarray(a, dtype=np.float64).ravel().tolist(),
            }
            for name, a in arrays.items()
        },
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> tuple[dict, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return arrays, doc.get("extra", {})
