"""
Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Each operation computes its forward value eagerly and records a closure that pushes the
upstream gradient to its parents. Tensor.backward() walks the graph in reverse topological
order from a scalar output.
"""

from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError


class Tensor:
    def __init__(self, data, requires_grad=False, parents: Tuple["Tensor", ...] = (), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = parents
        self._backward: Optional[Callable[[np.ndarray], None]] = backward

    # --- introspection ---

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # --- backward pass ---

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        grad = np.asarray(grad, dtype=np.float64)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self):
        if self.data.size != 1:
            raise InvalidArgumentError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise InvalidArgumentError("backward() on a tensor that does not require gradients")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # --- operator sugar ---

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    needs_grad = any(p.requires_grad for p in parents)
    if not needs_grad:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise InvalidArgumentError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


# --- elementwise ---


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data**2), b.shape))

    return _result(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: a._accumulate(-g))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data**2, (a,), lambda g: a._accumulate(2.0 * a.data * g))


def relu(a) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _result(np.where(positive, a.data, 0.0), (a,), lambda g: a._accumulate(g * positive))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (a,), lambda g: a._accumulate(g * y * (1.0 - y)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: a._accumulate(g * (1.0 - y**2)))


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return _result(y, (a,), backward)


# --- reductions ---


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"mse: shapes {a.shape} and {b.shape} differ")
    return mean(square(sub(a, b)))


def global_avg_pool(x) -> Tensor:
    """(C, H, W) -> (C,)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise InvalidArgumentError(f"global_avg_pool expects (C, H, W), got {x.shape}")
    return mean(x, axis=(1, 2))


# --- shape ---


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise InvalidArgumentError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from e
    return _result(out, (a,), lambda g: a._accumulate(np.reshape(g, a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: a._accumulate(np.transpose(g, inverse)))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Iterable[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidArgumentError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise InvalidArgumentError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accumulate(piece)

    return _result(out, tensors, backward)


# --- linear algebra ---


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Single-image convolution: x (Cin, H, W), weight (Cout, Cin, k, k), bias (Cout,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0] or weight.shape[2] != weight.shape[3]:
        raise InvalidArgumentError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    cin, H, W = x.shape
    k = weight.shape[2]
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise InvalidArgumentError(f"conv2d: kernel {k} too large for input {x.shape} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((cin, k, k, Ho, Wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    out = np.einsum("ocij,cijhw->ohw", weight.data, cols)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise InvalidArgumentError(f"conv2d: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        weight._accumulate(np.einsum("ohw,cijhw->ocij", g, cols))
        if bias is not None:
            bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gcols = np.einsum("ocij,ohw->cijhw", weight.data, g)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
            x._accumulate(gxp[:, padding : padding + H, padding : padding + W])

    return _result(out, parents, backward)


# --- finite-difference checking ---


def numerical_gradient(f: Callable[[], Tensor], tensor: Tensor, eps=1e-5) -> np.ndarray:
    """Central differences of the scalar f() with respect to every entry of tensor."""
    tensor.data = np.ascontiguousarray(tensor.data)
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = f().item()
        flat[i] = original - eps
        minus = f().item()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps=1e-5) -> float:
    """Largest relative error between analytic and numerical gradients over all inputs.

    Relative error per input is max|analytic - numeric| / max(max|numeric|, 1e-8).
    """
    for t in inputs:
        t.zero_grad()
    f().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numerical_gradient(f, t, eps)
        scale = max(float(np.max(np.abs(numeric))), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / scale)
    return worst
