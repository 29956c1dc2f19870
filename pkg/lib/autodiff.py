"""
Reverse-mode automatic differentiation over dense float64 arrays.

Each op builds a new `Tensor` that remembers its parents and a closure
mapping the output gradient to one gradient per parent. `backward` sorts the
graph topologically and runs the closures once each, in a fixed order, so
repeated calls on the same graph give bitwise-identical gradients.

Broadcasting is limited to adding a bias over the last axis; every other
shape mismatch is a ShapeError.
"""
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lib.errors import InputError, NumericError, ShapeError

GELU_COEF = math.sqrt(2.0 / math.pi)


class Tensor:
    """Immutable float64 array with an optional backward rule."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None, _op: str = ""):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"Non-finite values produced by {_op or 'tensor creation'} {name}".rstrip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor({label.strip() or self._op or 'leaf'}, shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires_grad, _parents=tuple(parents),
                  _backward=backward if requires_grad else None, _op=op)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range", x.shape)
    return axis % x.ndim


# --- elementwise and linear algebra ------------------------------------------------

def add(a, b) -> Tensor:
    """a + b for equal shapes, or b a bias vector over the last axis of a."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)), "add")
    raise ShapeError("add: incompatible shapes", a.shape, b.shape)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub: incompatible shapes", a.shape, b.shape)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul_scalar(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "mul_scalar")


def matmul(a, b) -> Tensor:
    """(..., m, k) @ (..., k, n) with identical leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul: incompatible shapes", a.shape, b.shape)

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ W (+ b) applied over the last axis; x is (..., in), W is (in, out)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear: incompatible shapes", x.shape, weight.shape)
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError("linear: bias does not match weight", bias.shape, weight.shape)
        out = out + bias.data
        parents.append(bias)
    n_in, n_out = weight.shape

    def backward(g):
        flat_g = g.reshape(-1, n_out)
        grads = [g @ weight.data.T, x.data.reshape(-1, n_in).T @ flat_g]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward, "linear")


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise InputError("concat needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError("concat: leading dimensions differ", tensors[0].shape, t.shape)
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=-1))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tensors, backward, "concat")


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("transpose needs at least 2 dimensions", x.shape)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError("reshape: element count differs", x.shape, shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: invalid axes {axes}", x.shape)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "permute")


def diagonal(x) -> Tensor:
    """Main diagonal of a square 2-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError("diagonal needs a square matrix", x.shape)
    n = x.shape[0]

    def backward(g):
        out = np.zeros((n, n))
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return _make(np.diagonal(x.data).copy(), (x,), backward, "diagonal")


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data.sum(), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    return mul_scalar(sum_all(x), 1.0 / x.data.size)


# --- reductions ----------------------------------------------------------------------

def mean_pool(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    n = x.shape[axis]

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _make(x.data.mean(axis=axis), (x,), backward, "mean_pool")


def max_pool(x, axis: int) -> Tensor:
    """Max over an axis; the gradient goes to the first maximal position only."""
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        grad = np.zeros(x.shape)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _make(out, (x,), backward, "max_pool")


# --- nonlinearities ----------------------------------------------------------------

def softmax(x) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def logsumexp(x, mask=None) -> Tensor:
    """log sum_j exp(x_j) over the last axis, restricted to entries where mask is True."""
    x = _as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError("logsumexp: mask shape differs", x.shape, mask.shape)
    if not mask.any(axis=-1).all():
        raise InputError("logsumexp: every row needs at least one unmasked entry")
    masked = np.where(mask, x.data, -np.inf)
    peak = masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(masked - peak), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    out = (np.log(total) + peak).squeeze(-1)
    weights = e / total

    def backward(g):
        return (weights * np.expand_dims(g, -1),)

    return _make(out, (x,), backward, "logsumexp")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    v = x.data
    inner = GELU_COEF * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = GELU_COEF * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _make(y, (x,), backward, "gelu")


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine weight and bias."""
    x = _as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    parents = [x]
    out = x_hat
    lead = tuple(range(x.ndim - 1))
    if weight is not None:
        weight = _as_tensor(weight)
        if weight.shape != (d,):
            raise ShapeError("layer_norm: weight does not match last axis", x.shape, weight.shape)
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (d,):
            raise ShapeError("layer_norm: bias does not match last axis", x.shape, bias.shape)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g_hat = g * weight.data if weight is not None else g
        grad_x = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        grads = [grad_x]
        if weight is not None:
            grads.append((g * x_hat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make(out, parents, backward, "layer_norm")


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """x / |x| over the last axis."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norm <= eps).any():
        raise NumericError("l2_normalize: zero-norm vector")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention: query and key widths differ", q.shape, k.shape)
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError("attention: keys and values differ in length", k.shape, v.shape)
    scores = mul_scalar(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores), v)


# --- graph traversal ---------------------------------------------------------------

def topological_order(output: Tensor) -> List[Tensor]:
    """Nodes reachable from output, parents before children. Iterative to avoid recursion limits."""
    order: List[Tensor] = []
    visited = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Gradients of a scalar output with respect to every leaf that requires grad.

    The graph itself is never mutated; gradients are accumulated in a fresh
    mapping on each call.
    """
    if output.data.size != 1:
        raise InputError(f"backward needs a scalar output, got shape {output.shape}")
    grads: Dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(topological_order(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for leaf, g in leaves.items():
        if not np.isfinite(g).all():
            raise NumericError(f"Non-finite gradient for {leaf!r}")
    return leaves


def gradients_by_name(output: Tensor, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """backward() keyed by parameter name; parameters outside the graph get zeros."""
    grads = backward(output)
    return {name: grads.get(t, np.zeros(t.shape)) for name, t in params.items() if t.requires_grad}
