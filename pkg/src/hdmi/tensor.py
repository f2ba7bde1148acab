"""Dense arrays with a recorded forward graph and exact vector-Jacobian products.

Every operation returns a new :class:`Tensor` holding its numpy result, the
parents it was computed from and a closure mapping an upstream cotangent to
one cotangent per parent. :func:`backward` walks that record in reverse
topological order, so the gradient of any scalar with respect to any tensor
that took part in its computation is exact up to floating point.

Shapes are explicit: elementwise binary ops require equal shapes, with the
single exception of adding a 1-D bias along the last axis.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor", "as_tensor", "add", "sub", "mul", "scale", "matmul", "linear",
    "broadcast_to", "transpose", "reshape", "gelu", "relu", "softmax", "log_softmax",
    "layer_norm", "embedding", "take", "concat", "total", "masked_fill",
    "backward", "gradients", "finite_difference_grad", "relative_error",
]

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An immutable array node in a computation record.

    ``op`` names the producing operation (``"leaf"`` for inputs), ``parents``
    are the upstream nodes and ``vjp`` maps the cotangent of this node to the
    cotangents of its parents.
    """

    __slots__ = ("data", "op", "parents", "vjp")

    def __init__(self, data, op: str = "leaf", parents: tuple = (), vjp: Vjp | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        else:
            arr = arr.view()
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"non-finite values produced by {op!r}")
        arr.flags.writeable = False
        self.data = arr
        self.op = op
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _not_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _sum_to_bias(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> bool:
    """True when ``b`` is a bias along the last axis of ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are incompatible")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _binary_shapes(a, b, "add")
    n = b.shape[0] if bias else None

    def vjp(g):
        return g, (_sum_to_bias(g, n) if bias else g)

    return Tensor(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _binary_shapes(a, b, "sub")
    n = b.shape[0] if bias else None

    def vjp(g):
        return g, -(_sum_to_bias(g, n) if bias else g)

    return Tensor(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shape tensors, or scaling by a python number."""
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    if isinstance(a, (int, float)):
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return Tensor(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor(ad @ bd, "matmul", (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (..., in) and ``weight`` (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    flat = xd.reshape(-1, wd.shape[1])
    out = (flat @ wd.T).reshape(*xd.shape[:-1], wd.shape[0])

    def vjp(g):
        g2 = g.reshape(-1, wd.shape[0])
        return (g2 @ wd).reshape(xd.shape), g2.T @ flat

    y = Tensor(out, "linear", (x, weight), vjp)
    return y if bias is None else add(y, bias)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast along leading axes; the VJP sums them back."""
    a = as_tensor(a)
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0 or any(s not in (1, t) for s, t in zip(a.shape, shape[lead:])):
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    old = a.shape

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(old) if s == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return Tensor(np.broadcast_to(a.data, shape).copy(), "broadcast_to", (a,), vjp)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes), "transpose", (a,),
                  lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return Tensor(out, "gelu", (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    return temperature


def softmax(v, temperature: float = 1.0) -> Tensor:
    """Softmax of ``v / temperature`` along the last axis (max-subtracted)."""
    temperature = _check_temperature(temperature)
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[-1] < 1:
        raise ShapeError("softmax needs at least one entry")
    z = v.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((y * (g - (g * y).sum(axis=-1, keepdims=True))) / temperature,)

    return Tensor(y, "softmax", (v,), vjp)


def log_softmax(v) -> Tensor:
    v = as_tensor(v)
    z = v.data - v.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor(out, "log_softmax", (v,),
                  lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(v, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    v, gain, bias = as_tensor(v), as_tensor(gain), as_tensor(bias)
    n = v.shape[-1] if v.ndim else 0
    if n < 2:
        raise DomainError("layer_norm needs at least 2 features")
    if not eps > 0:
        raise DomainError("layer_norm eps must be positive")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},)")
    x = v.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_to_bias(g * xhat, n), _sum_to_bias(g, n)

    return Tensor(xhat * gd + bias.data, "layer_norm", (v, gain, bias), vjp)


def embedding(table, ids) -> Tensor:
    """Rows of ``table`` selected by the integer array ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return Tensor(table.data[ids], "embedding", (table,), vjp)


def take(a, index) -> Tensor:
    """Basic or advanced numpy indexing with a scatter-add VJP."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor(a.data[index], "take", (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, vjp)


def total(a) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    a = as_tensor(a)
    shape = a.shape
    return Tensor(np.asarray(a.data.sum()), "sum", (a,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by the constant ``value``."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return Tensor(np.where(mask, value, a.data), "masked_fill", (a,),
                  lambda g: (np.where(mask, 0.0, g),))


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(root: Tensor, wrt: Iterable[Tensor], cotangent=None) -> list[np.ndarray]:
    """Gradients of ``root`` with respect to each tensor in ``wrt``.

    ``cotangent`` defaults to one for a scalar root. Raises ``LookupError`` if a
    requested tensor did not take part in computing ``root``.
    """
    wrt = list(wrt)
    if cotangent is None:
        if root.data.size != 1:
            raise ShapeError("a cotangent is required for a non-scalar root")
        cotangent = np.ones(root.shape, dtype=root.data.dtype)
    order = _topological(root)
    present = {id(n) for n in order}
    for w in wrt:
        if id(w) not in present:
            raise LookupError("tensor is not part of the computation record")
    grads: dict[int, np.ndarray] = {id(root): np.asarray(cotangent, dtype=root.data.dtype)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(w), np.zeros(w.shape, dtype=w.data.dtype)).reshape(w.shape)
            for w in wrt]


def backward(root: Tensor, wrt: Tensor, cotangent=None) -> np.ndarray:
    """Gradient of ``root`` with respect to a single tensor ``wrt``."""
    return gradients(root, [wrt], cotangent)[0]


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           rel_step: float = 1e-5) -> np.ndarray:
    """Central differences with step ``rel_step * max(1, |x_i|)`` per coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        h = rel_step * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    """``||a - b|| / max(||a||, ||b||)``, zero when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
