"""Dense-tensor engine with reverse-mode automatic differentiation.

Every operation goes through a registry keyed by op kind, so the whole op
surface can be enumerated for gradient checking. The tape is the implicit
graph of parent links; `backward` linearizes it topologically and visits
each node exactly once. Single-threaded per training step by contract.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for an op kind."""

    def __init__(self, kind: str, shapes, detail: str = ""):
        msg = f"{kind}: incompatible shapes {[tuple(s) for s in shapes]}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.kind = kind
        self.shapes = [tuple(s) for s in shapes]


class DegenerateSigmaError(ValueError):
    """Normalization over a constant vector with epsilon 0 (sigma = 0)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (eval / probe forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense n-d array plus autodiff bookkeeping.

    `data` is a row-major numpy buffer (float32 or float64). `grad` is
    materialized lazily and only for tensors with requires_grad set.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op",
                 "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag}, op={self._op})"


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# Each kernel maps (arrays, attrs) -> (out, backward) where
# backward(g, needs) returns one gradient per input (None where not needed).
_OPS = {}


def register_op(kind):
    def decorator(fn):
        _OPS[kind] = fn
        return fn
    return decorator


def op_kinds():
    return sorted(_OPS)


@register_op("matmul")
def _matmul(arrays, attrs):
    a, b = arrays
    transpose_b = bool(attrs.get("transpose_b", False))
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", [a.shape, b.shape], "operands must be >= 2-d")
    b_inner = b.shape[-1] if transpose_b else b.shape[-2]
    if a.shape[-1] != b_inner:
        raise ShapeError("matmul", [a.shape, b.shape],
                         f"inner dims {a.shape[-1]} vs {b_inner}")
    bT = np.swapaxes(b, -1, -2) if transpose_b else b
    out = a @ bT

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ b if transpose_b else g @ np.swapaxes(b, -1, -2), a.shape)
        if needs[1]:
            if transpose_b:
                gb = _unbroadcast(np.swapaxes(g, -1, -2) @ a, b.shape)
            else:
                gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb

    return out, backward


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, [a.shape, b.shape]) from None


@register_op("add")
def _add(arrays, attrs):
    a, b = arrays
    _check_broadcast("add", a, b)
    out = a + b

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return out, backward


@register_op("mul")
def _mul(arrays, attrs):
    a, b = arrays
    _check_broadcast("mul", a, b)
    out = a * b

    def backward(g, needs):
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)

    return out, backward


@register_op("embed_lookup")
def _embed_lookup(arrays, attrs):
    (w,) = arrays
    ids = np.asarray(attrs["ids"])
    if w.ndim != 2:
        raise ShapeError("embed_lookup", [w.shape], "weight must be 2-d")
    out = w[ids]

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        gw = np.zeros_like(w)
        np.add.at(gw, ids, g)
        return (gw,)

    return out, backward


@register_op("softmax")
def _softmax(arrays, attrs):
    (x,) = arrays
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return out, backward


@register_op("silu")
def _silu(arrays, attrs):
    (x,) = arrays
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return out, backward


def _norm_backward_core(gy, y, inv_scale, subtract_mean):
    # shared closed form: (1/s) * (gy - y*mean(gy*y) [- mean(gy)])
    gx = gy - y * (gy * y).mean(axis=-1, keepdims=True)
    if subtract_mean:
        gx = gx - gy.mean(axis=-1, keepdims=True)
    return gx * inv_scale


@register_op("layer_norm")
def _layer_norm(arrays, attrs):
    x, gain, bias = arrays
    eps = float(attrs.get("eps", 1e-5))
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", [x.shape, gain.shape, bias.shape],
                         "gain/bias must match last axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if eps == 0.0 and np.any(var == 0.0):
        raise DegenerateSigmaError("layer_norm: constant input with eps=0 (sigma=0)")
    sigma = np.sqrt(var + eps)
    y = xc / sigma
    out = y * gain + bias

    def backward(g, needs):
        gx = ggain = gbias = None
        if needs[2]:
            gbias = _unbroadcast(g, bias.shape)
        if needs[1]:
            ggain = _unbroadcast(g * y, gain.shape)
        if needs[0]:
            gx = _norm_backward_core(g * gain, y, 1.0 / sigma, subtract_mean=True)
        return gx, ggain, gbias

    return out, backward


@register_op("rms_norm")
def _rms_norm(arrays, attrs):
    x, gain = arrays
    eps = float(attrs.get("eps", 1e-5))
    if gain.shape != x.shape[-1:]:
        raise ShapeError("rms_norm", [x.shape, gain.shape], "gain must match last axis")
    ms = (x * x).mean(axis=-1, keepdims=True)
    if eps == 0.0 and np.any(ms == 0.0):
        raise DegenerateSigmaError("rms_norm: zero input with eps=0")
    scale = np.sqrt(ms + eps)
    y = x / scale
    out = y * gain

    def backward(g, needs):
        gx = ggain = None
        if needs[1]:
            ggain = _unbroadcast(g * y, gain.shape)
        if needs[0]:
            gx = _norm_backward_core(g * gain, y, 1.0 / scale, subtract_mean=False)
        return gx, ggain

    return out, backward


@register_op("cross_entropy")
def _cross_entropy(arrays, attrs):
    (logits,) = arrays
    targets = np.asarray(attrs["targets"])
    ignore_index = int(attrs.get("ignore_index", -1))
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("cross_entropy", [logits.shape, targets.shape],
                         "targets must match logits minus class axis")
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = targets.reshape(-1)
    valid = tgt != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: no targets to score (all ignored)")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(flat.shape[0]), np.where(valid, tgt, 0)]
    nll = np.where(valid, logz - picked, 0.0)
    out = np.asarray(nll.sum() / count, dtype=logits.dtype)

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        p = np.exp(shifted - logz[:, None])
        p[np.arange(flat.shape[0]), np.where(valid, tgt, 0)] -= 1.0
        p[~valid] = 0.0
        gl = (p * (np.asarray(g).reshape(()) / count)).astype(logits.dtype)
        return (gl.reshape(logits.shape),)

    return out, backward


@register_op("transpose")
def _transpose(arrays, attrs):
    (x,) = arrays
    axes = tuple(attrs["axes"])
    if len(axes) != x.ndim:
        raise ShapeError("transpose", [x.shape], f"axes {axes} rank mismatch")
    out = np.transpose(x, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (np.transpose(g, inverse) if needs[0] else None,)

    return out, backward


@register_op("reshape")
def _reshape(arrays, attrs):
    (x,) = arrays
    shape = tuple(attrs["shape"])
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [x.shape], f"cannot reshape to {shape}") from None

    def backward(g, needs):
        return (g.reshape(x.shape) if needs[0] else None,)

    return out, backward


@register_op("mean")
def _mean(arrays, attrs):
    (x,) = arrays
    axis = attrs.get("axis", None)
    keepdims = bool(attrs.get("keepdims", False))
    out = x.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return out, backward


@register_op("concat")
def _concat(arrays, attrs):
    axis = int(attrs.get("axis", 0))
    base = list(arrays[0].shape)
    for a in arrays[1:]:
        other = list(a.shape)
        if len(other) != len(base) or any(
                i != axis % len(base) and other[i] != base[i] for i in range(len(base))):
            raise ShapeError("concat", [a.shape for a in arrays], f"axis {axis}")
    out = np.concatenate(arrays, axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g, needs):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return out, backward


def op_forward(kind: str, inputs: list[Tensor], attrs: dict | None = None) -> Tensor:
    """Run a registered op, recording it on the tape when grads are enabled."""
    if kind not in _OPS:
        raise KeyError(f"unknown op kind {kind!r}; known: {op_kinds()}")
    dtypes = {t.data.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ValueError(f"{kind}: mixed dtypes in one graph: {sorted(map(str, dtypes))}")
    out_array, backward_fn = _OPS[kind]([t.data for t in inputs], attrs or {})
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_array, requires_grad=needs)
    out._op = kind
    if needs:
        out._parents = tuple(inputs)
        out._backward = backward_fn
    return out


# Thin wrappers so call sites read naturally.

def matmul(a, b, transpose_b=False):
    return op_forward("matmul", [a, b], {"transpose_b": transpose_b})


def add(a, b):
    return op_forward("add", [a, b])


def mul(a, b):
    return op_forward("mul", [a, b])


def embed_lookup(weight, ids):
    return op_forward("embed_lookup", [weight], {"ids": ids})


def softmax(x):
    return op_forward("softmax", [x])


def silu(x):
    return op_forward("silu", [x])


def layer_norm(x, gain, bias, eps=1e-5):
    return op_forward("layer_norm", [x, gain, bias], {"eps": eps})


def rms_norm(x, gain, eps=1e-5):
    return op_forward("rms_norm", [x, gain], {"eps": eps})


def cross_entropy(logits, targets, ignore_index=-1):
    return op_forward("cross_entropy", [logits],
                      {"targets": targets, "ignore_index": ignore_index})


def transpose(x, axes):
    return op_forward("transpose", [x], {"axes": axes})


def reshape(x, shape):
    return op_forward("reshape", [x], {"shape": shape})


def mean(x, axis=None, keepdims=False):
    return op_forward("mean", [x], {"axis": axis, "keepdims": keepdims})


def concat(tensors, axis=0):
    return op_forward("concat", list(tensors), {"axis": axis})


def _toposort(root: Tensor) -> list[Tensor]:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order  # parents before consumers


def backward(loss: Tensor) -> None:
    """Accumulate gradients of `loss` into every requires_grad tensor below it.

    Grads add across calls from distinct losses; a second backward from the
    same loss needs the graph rebuilt and raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward: already ran for this loss; rebuild the graph")
    loss._backward_done = True
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        needs = [p.requires_grad for p in node._parents]
        grads = node._backward(node.grad, needs)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
