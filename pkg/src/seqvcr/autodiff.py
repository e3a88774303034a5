"""Dense float64 tensors with tape-based reverse-mode autodiff.

Everything is numpy under the hood. A ``Tape`` records operations as they
run; ``backward`` replays the tape in reverse and accumulates gradients
into every ``requires_grad`` tensor it touched. Ops only record when a
tape is active, so evaluation-mode forward passes pay no bookkeeping.

Calling ``backward`` twice on the same tape raises unless
``allow_repeat=True`` is passed, in which case gradients accumulate.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT_2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# Module-level active tape; ops record onto it when set.
_ACTIVE_TAPE: "Tape | None" = None


class Node:
    """One recorded operation: inputs, output, and the local vjp."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp  # out_grad -> tuple of grads aligned with inputs


class Tape:
    """Ordered operation record; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._used = False

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


class Tensor:
    """Dense float64 array plus optional gradient.

    Values are immutable by convention after creation; only ``grad``
    accumulates. ``requires_grad`` marks trainable leaves; interior
    tensors inherit it from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            # grads are treated as read-only downstream, so g (which may be
            # a view of another tensor's grad) is adopted without a copy
            g = np.asarray(g, dtype=np.float64)
            if g.shape != self.data.shape:
                g = np.broadcast_to(g, self.data.shape).copy()
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _record(op, inputs, out_data, vjp):
    """Build the output tensor and record a node if a tape is active."""
    out = Tensor(out_data)
    out.requires_grad = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE.nodes.append(Node(op, inputs, out, vjp))
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to the given (possibly broadcast) input shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(tape: Tape, root: Tensor, allow_repeat: bool = False):
    """Populate grads of every requires_grad tensor reachable from root.

    root must be a scalar produced under this tape. Each node is visited
    exactly once, in reverse recording order.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    if tape._used and not allow_repeat:
        raise RuntimeError("backward already ran on this tape; pass allow_repeat=True to accumulate")
    tape._used = True
    flows: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    tensors: dict[int, Tensor] = {id(root): root}
    for node in reversed(tape.nodes):
        out_grad = flows.get(id(node.output))
        if out_grad is None:
            continue
        grads = node.vjp(out_grad)
        for t, g in zip(node.inputs, grads):
            if g is None or not (isinstance(t, Tensor) and t.requires_grad):
                continue
            key = id(t)
            if key in flows:
                flows[key] = flows[key] + g
            else:
                flows[key] = g
                tensors[key] = t
    for key, t in tensors.items():
        t._accum(flows[key])


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(_as_array(a))
    if not isinstance(b, Tensor):
        b = Tensor(_as_array(b))
    out_data = a.data + b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if need_a else None,
                _unbroadcast(g, b.data.shape) if need_b else None)

    return _record("add", (a, b), out_data, vjp)


def mul(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(_as_array(a))
    if not isinstance(b, Tensor):
        b = Tensor(_as_array(b))
    out_data = a.data * b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape) if need_a else None,
                _unbroadcast(g * a.data, b.data.shape) if need_b else None)

    return _record("mul", (a, b), out_data, vjp)


def _mm(x, y):
    """Matrix product that flattens a (batched x 2-D) case into one GEMM."""
    if x.ndim > 2 and y.ndim == 2:
        lead = x.shape[:-1]
        return np.matmul(x.reshape(-1, x.shape[-1]), y).reshape(lead + (y.shape[-1],))
    return np.matmul(x, y)


def matmul(a: Tensor, b: Tensor):
    """Matrix product, batched over leading axes as numpy matmul does."""
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = _mm(a.data, b.data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if need_b:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g),
                                  b.data.shape)
        return ga, gb

    return _record("matmul", (a, b), out_data, vjp)


def linear(x: Tensor, w: Tensor, b: Tensor):
    """Fused affine map over the last axis: x @ w + b."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.data.shape} @ {w.data.shape}")
    out_data = _mm(x.data, w.data)
    out_data += b.data
    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b.requires_grad

    def vjp(g):
        gx = gw = gb = None
        g2 = g.reshape(-1, g.shape[-1])
        if need_x:
            gx = _mm(g, w.data.T)
        if need_w:
            gw = x.data.reshape(-1, x.data.shape[-1]).T @ g2
        if need_b:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _record("linear", (x, w, b), out_data, vjp)


def reshape(x: Tensor, shape):
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _record("reshape", (x,), out_data, vjp)


def transpose(x: Tensor, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _record("transpose", (x,), out_data, vjp)


def tsum(x: Tensor, axis=None, keepdims=False):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _record("sum", (x,), out_data, vjp)


def tmean(x: Tensor, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(x: Tensor):
    out_data = np.exp(x.data)

    def vjp(g):
        return (g * out_data,)

    return _record("exp", (x,), out_data, vjp)


def log(x: Tensor):
    out_data = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _record("log", (x,), out_data, vjp)


def sqrt(x: Tensor):
    out_data = np.sqrt(x.data)

    def vjp(g):
        return (g * 0.5 / out_data,)

    return _record("sqrt", (x,), out_data, vjp)


def square(x: Tensor):
    out_data = x.data * x.data

    def vjp(g):
        return (g * 2.0 * x.data,)

    return _record("square", (x,), out_data, vjp)


def relu(x: Tensor):
    out_data = np.maximum(x.data, 0.0)

    def vjp(g):
        return (g * (x.data > 0.0),)

    return _record("relu", (x,), out_data, vjp)


def gelu(x: Tensor):
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    phi = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    out_data = x.data * phi

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (phi + x.data * pdf),)

    return _record("gelu", (x,), out_data, vjp)


def softmax(x: Tensor, axis=-1):
    """Numerically stabilized softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - dot) * out_data,)

    return _record("softmax", (x,), out_data, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        axes = tuple(range(x.data.ndim - 1))
        dgain = (g * xhat).sum(axis=axes) if axes else g * xhat
        dbias = g.sum(axis=axes) if axes else g
        return dx, dgain.reshape(d), dbias.reshape(d)

    return _record("layer_norm", (x, gain, bias), out_data, vjp)


def embedding(table: Tensor, ids):
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding ids out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}")
    out_data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _record("embedding", (table,), out_data, vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator):
    """Inverted dropout; identity when p == 0."""
    if p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out_data = x.data * keep

    def vjp(g):
        return (g * keep,)

    return _record("dropout", (x,), out_data, vjp)


def cross_entropy_from_logits(logits: Tensor, targets, mask=None):
    """Mean of -log softmax(logits)[target] over unmasked positions.

    logits: (..., V); targets: integer array matching the leading shape;
    mask: boolean array over the leading shape (True = contributes).
    Raises if every position is masked out.
    """
    targets = np.asarray(targets)
    lead_shape = logits.data.shape[:-1]
    if targets.shape != lead_shape:
        raise ValueError(f"targets shape {targets.shape} != logits leading shape {lead_shape}")
    if mask is None:
        mask = np.ones(lead_shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: all positions masked, mean undefined")
    v = logits.data.shape[-1]
    tclip = np.where(mask, targets, 0)
    if tclip.min() < 0 or tclip.max() >= v:
        raise ValueError(f"target ids out of range [0, {v})")

    m = logits.data.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits.data - m).sum(axis=-1))
    picked = np.take_along_axis(logits.data, tclip[..., None], axis=-1)[..., 0]
    out_data = ((lse - picked) * mask).sum() / n

    def vjp(g):
        p = np.exp(logits.data - lse[..., None])
        flat = p.reshape(-1, v)
        flat[np.arange(tclip.size), tclip.reshape(-1)] -= 1.0
        p *= (mask[..., None] / n)
        return (g * p,)

    return _record("cross_entropy", (logits,), out_data, vjp)
