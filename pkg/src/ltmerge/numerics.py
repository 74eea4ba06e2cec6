"""Dense tensors with a recording tape for reverse-mode differentiation.

Arrays are numpy-backed. A :class:`Tape` used as a context manager records
every primitive whose inputs need gradients; ``tape.backward(loss)`` walks the
record in reverse and returns the gradient of every leaf tensor created with
``requires_grad=True``.

The primitive vocabulary is deliberately closed: matmul, add, sub, mul,
relu, sigmoid, softmax, layer_norm, reshape, transpose, concat, sum, mean and
cross_entropy.  Everything in the model is built from these.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class NumericsError(FloatingPointError):
    """A primitive produced NaN/Inf or was called with inconsistent shapes."""


_DTYPES = {"f32": np.float32, "f64": np.float64}


def as_dtype(name) -> np.dtype:
    if isinstance(name, str):
        try:
            return np.dtype(_DTYPES[name])
        except KeyError:
            raise ValueError(f"unknown dtype tag {name!r}") from None
    return np.dtype(name)


def dtype_tag(dtype) -> str:
    dtype = np.dtype(dtype)
    for tag, dt in _DTYPES.items():
        if np.dtype(dt) == dtype:
            return tag
    raise ValueError(f"unsupported dtype {dtype}")


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator; ``keys`` derive independent sub-streams of one seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=as_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _tracked(self, tape: "Tape") -> bool:
        return self.requires_grad or self._tape is tape

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by scalars")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], Sequence]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops run, so parents always precede children.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, loss: Tensor) -> dict:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if loss._tape is not self:
            return {loss: np.ones_like(loss.data)} if loss.requires_grad else {}
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.backward(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not isinstance(parent, Tensor) or not parent._tracked(self):
                    continue
                key = id(parent)
                if parent._tape is not self:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return {leaves[k]: grads[k] for k in leaves if k in grads}

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        out = self.backward(loss)
        return [out.get(t, np.zeros_like(t.data)) for t in wrt]


def _wrap(x, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like if like is not None else np.float64))


def _emit(name: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"{name} produced non-finite values")
    out = Tensor(data)
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is not None and any(isinstance(p, Tensor) and p._tracked(tape) for p in parents):
        out._tape = tape
        out._node = len(tape.nodes)
        tape.nodes.append(_Node(out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _dtype_of(*xs) -> np.dtype:
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    return np.dtype(np.float64)


def add(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _wrap(a, dt), _wrap(b, dt)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _wrap(a, dt), _wrap(b, dt)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _wrap(a)
        s = a.dtype.type(b)
        return _emit("mul", a.data * s, (a,), lambda g: (g * s,))
    dt = _dtype_of(a, b)
    a, b = _wrap(a, dt), _wrap(b, dt)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise NumericsError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", a.data @ b.data, (a, b), back)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    # two-branch form avoids exp overflow for large |x|
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def softmax_array(d: np.ndarray, axis: int = -1) -> np.ndarray:
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = softmax_array(x.data, axis)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), back)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise NumericsError("softmax_rows expects a matrix")
    return softmax(x, axis=1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        gx_hat = g * gamma.data
        n = d.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _emit("layer_norm", y, (x, gamma, beta), back)


def reshape(x: Tensor, shape) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    d = logits.data
    if d.ndim != 2 or labels.shape != (d.shape[0],):
        raise NumericsError(f"cross_entropy shape mismatch: {d.shape} vs {labels.shape}")
    z = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(d.shape[0])
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / d.shape[0]),)

    return _emit("cross_entropy", np.asarray(loss, dtype=d.dtype), (logits,), back)


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    x = np.array(x, dtype=np.float64, order="C")
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = fn(x)
        flat[k] = orig - step
        fm = fn(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * step)
    return out
