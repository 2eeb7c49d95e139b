"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every trainable component in the package is expressed with the primitives in
this module.  A :class:`Tensor` records the primitive that produced it and its
parents; calling :meth:`Tensor.backward` walks that graph in reverse
topological order and accumulates gradients into leaves flagged
``requires_grad``.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_VERSION = 1

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives operands with incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN/Inf shows up where the training contract forbids it."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name", "id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 op: str = "leaf", parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def label(self) -> str:
        return f"{self.op}#{self.id}" + (f"({self.name})" if self.name else "")

    def __repr__(self) -> str:
        return f"Tensor({self.label()}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf), contracted with ``grad``, into every leaf."""
        if not self.requires_grad:
            raise RuntimeError(f"{self.label()} does not depend on any trainable tensor")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"{self.label()}: implicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"{self.label()}: output gradient shape {grad.shape} != {self.shape}")

        order = _topological(self)
        grads = {self.id: grad}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(data, op: str, parents: tuple, backward) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg, op=op, parents=parents if rg else (),
                 backward=backward if rg else None)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{out.label()} produced non-finite values from "
                             + ", ".join(p.label() for p in parents))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.label()} {a.shape} with "
                         f"{b.label()} {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    return _node(a.data - b.data, "subtract", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    return _node(a.data * b.data, "multiply", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise ShapeError(f"matmul: inner dimensions differ for {a.label()} {a.shape} "
                         f"and {b.label()} {b.shape}")
    if a.ndim == 1 or b.ndim == 1:
        a2 = reshape(a, (1, -1)) if a.ndim == 1 else a
        b2 = reshape(b, (-1, 1)) if b.ndim == 1 else b
        out = matmul(a2, b2)
        if a.ndim == 1 and b.ndim == 1:
            return reshape(out, ())
        return reshape(out, out.shape[1:] if a.ndim == 1 else out.shape[:-1])
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.label()} {a.shape} and "
                         f"{b.label()} {b.shape} do not broadcast") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, "matmul", (a, b), back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, "softmax", (a,), back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _node(y, "exp", (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError(f"log: non-positive input from {a.label()}")
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError(f"sqrt: negative input from {a.label()}")
    y = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
        return (g * d,)

    return _node(y, "sqrt", (a,), back)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, "sum", (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def squared_l2(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Sum of squares along ``axis``."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = (a.data * a.data).sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (2.0 * a.data * g,)

    return _node(out, "squared_l2", (a,), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: {t.label()} {t.shape} incompatible with {ref} on axis {ax}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _node(np.concatenate([t.data for t in ts], axis=ax), "concat", tuple(ts), back)


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, Ellipsis."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} on {a.label()} {a.shape}") from None

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _node(np.array(out), "slice", (a,), back)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for {a.label()} {a.shape}")
    inv = np.argsort([ax % a.ndim for ax in axes])
    return _node(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.label()} {a.shape} as {shape}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


# composite helpers (built only from the primitives above)

def silu(a) -> Tensor:
    return multiply(a, sigmoid(a))


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


# ---------------------------------------------------------------- graphs

class Graph:
    """A parameterised function with declared inputs.

    ``fn(params, **inputs)`` must return a Tensor or a dict of Tensors.  Input
    declarations map names to shapes; ``None`` entries match any size.
    """

    def __init__(self, fn: Callable, params: Mapping[str, Tensor],
                 inputs: Mapping[str, tuple | None], output: str | None = None):
        self.fn = fn
        self.params = dict(params)
        self.inputs = dict(inputs)
        self.output = output
        self._outputs = None

    def _check(self, values: Mapping) -> dict:
        missing = set(self.inputs) - set(values)
        extra = set(values) - set(self.inputs)
        if missing or extra:
            raise ShapeError(f"inputs: missing {sorted(missing)}, unexpected {sorted(extra)}")
        out = {}
        for name, val in values.items():
            t = as_tensor(val)
            want = self.inputs[name]
            if want is not None and (len(want) != t.ndim or
                                     any(w is not None and w != s for w, s in zip(want, t.shape))):
                raise ShapeError(f"input '{name}': shape {t.shape} does not match {want}")
            out[name] = t
        return out

    def forward(self, **inputs):
        outs = self.fn(self.params, **self._check(inputs))
        self._outputs = outs
        return outs

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def backward(self, output_gradient=None) -> dict[str, np.ndarray]:
        if self._outputs is None:
            raise RuntimeError("backward called before forward")
        out = self._outputs
        if isinstance(out, dict):
            if self.output is None:
                raise RuntimeError("graph has several outputs; set Graph.output")
            out = out[self.output]
        out.backward(output_gradient)
        return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in self.params.items()}


def forward_eval(graph: Graph, inputs: Mapping) -> Tensor | dict:
    return graph.forward(**inputs)


def backward(graph: Graph, output_gradient=None) -> dict[str, np.ndarray]:
    return graph.backward(output_gradient)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update; parameter arrays are replaced, not mutated."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"adam: gradient of '{name}' has {bad} non-finite entries "
                                 f"at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient of '{name}' has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------- randomness

def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


class Rng:
    """Seed tree: ``Rng(7).child("init").generator()`` is reproducible by name."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (_name_key(str(name)),))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=self.path))


# ---------------------------------------------------------------- checkpoints

def params_to_dict(params: Mapping[str, Tensor]) -> dict:
    return {name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
            for name, p in params.items()}


def params_from_dict(blob: Mapping) -> dict[str, Tensor]:
    out = {}
    for name, entry in blob.items():
        shape = tuple(int(s) for s in entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise ValueError(f"parameter '{name}': {data.size} values for shape {shape}")
        out[name] = parameter(data.reshape(shape), name=name)
    return out


def save_params(path, params: Mapping[str, Tensor]) -> None:
    with open(path, "w") as fh:
        json.dump({"version": CHECKPOINT_VERSION, "params": params_to_dict(params)}, fh)


def load_params(path) -> dict[str, Tensor]:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    return params_from_dict(blob["params"])


def finite_difference_grad(f: Callable[[], float], arrays: Iterable[np.ndarray],
                           step: float = 1e-4) -> list[np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. each array (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        out.append(g)
    return out
