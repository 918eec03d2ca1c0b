"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Each op returns a new ``Tensor`` holding its parents and a closure that maps
the output gradient to parent gradients. ``Tensor.backward`` walks the graph
in reverse topological order, visiting every node once.

The ops are coarse on purpose (fused RMS norm, fused cross-entropy, a gated
scan, sparse attention) so a training step stays a few dozen graph nodes.
"""

from __future__ import annotations

import math

import numpy as np

from .. import kernels
from ..errors import InvalidInputError


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise InvalidInputError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise AssertionError(f"gradient shape {pg.shape} != value shape {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from exc
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return Tensor(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from exc
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = constant(a)
    return Tensor(a.value * c, (a,), lambda g: (g * c,))


def stable_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = constant(a)
    s = stable_sigmoid(a.value)
    return Tensor(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = constant(a)
    t = np.tanh(a.value)
    return Tensor(t, (a,), lambda g: (g * (1.0 - t * t),))


# --------------------------------------------------------------------------
# reductions and products


def reshape(a, shape) -> Tensor:
    a = constant(a)
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum_all(a) -> Tensor:
    a = constant(a)
    return Tensor(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Tensor:
    a = constant(a)
    n = a.value.size
    return Tensor(np.mean(a.value), (a,), lambda g: (np.full(a.shape, g / n),))


def matmul(x, W) -> Tensor:
    """``x @ W`` for x of shape (..., n) and a 2-D weight W of shape (n, m)."""
    x, W = constant(x), constant(W)
    if W.value.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch: {x.shape} @ {W.shape}")

    def back(g):
        gx = g @ W.value.T if x.requires_grad else None
        gW = None
        if W.requires_grad:
            gW = x.value.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gW

    return Tensor(x.value @ W.value, (x, W), back)


def embedding(table, ids) -> Tensor:
    table = constant(table)
    ids = np.asarray(ids)

    def back(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return Tensor(table.value[ids], (table,), back)


def rms_norm(x, weight, eps: float = 1e-6) -> Tensor:
    x, weight = constant(x), constant(weight)
    ms = np.mean(x.value * x.value, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.value * inv
    n = x.shape[-1]

    def back(g):
        gw = _unbroadcast(g * xhat, weight.shape)
        gh = g * weight.value
        gx = inv * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return gx, gw

    return Tensor(xhat * weight.value, (x, weight), back)


# --------------------------------------------------------------------------
# softmax family


def masked_softmax(logits, mask) -> Tensor:
    """Softmax along the last axis over positions where ``mask`` is true.

    Excluded positions get probability exactly 0 and receive zero gradient;
    fully-masked rows give all zeros.
    """
    logits = constant(logits)
    mask = np.asarray(mask, dtype=bool)
    z = np.where(mask, logits.value, -np.inf)
    mx = np.max(z, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(z - mx), 0.0)
    tot = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)

    def back(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return Tensor(p, (logits,), back)


def log_softmax_np(z):
    mx = np.max(z, axis=-1, keepdims=True)
    s = z - mx
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def cross_entropy(logits, labels, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[label]; weight 0 drops a position."""
    logits = constant(logits)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise InvalidInputError(f"logits {logits.shape} do not match labels {labels.shape}")
    w = np.ones(labels.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise InvalidInputError("cross-entropy needs at least one weighted position")
    logp = log_softmax_np(logits.value)
    safe = np.where(w > 0, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -np.sum(w * picked) / total

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (w / total)[..., None],)

    return Tensor(loss, (logits,), back)


def pairwise_ranking_loss(x, y, group_weights=None) -> Tensor:
    """Pairwise logistic ranking loss, averaged over groups.

    ``x`` holds scores with shape (..., k) and ``y`` constant targets whose
    shape broadcasts against it; every leading index of the broadcast shape is
    one group with loss (1/k^2) * sum_ij BCE(x_i - x_j, [y_i > y_j] or 1/2 on ties).
    ``group_weights`` (leading shape) turns the plain mean into a weighted one.
    """
    x = constant(x)
    y = np.asarray(y, dtype=np.float64)
    k = x.shape[-1]
    full = np.broadcast_shapes(y.shape, x.shape)
    yb = np.broadcast_to(y, full)
    xb = np.broadcast_to(x.value, full)
    lead = full[:-1]
    wg = np.ones(lead) if group_weights is None else np.broadcast_to(np.asarray(group_weights, dtype=np.float64), lead)
    total = wg.sum()
    if total <= 0:
        raise InvalidInputError("ranking loss needs at least one weighted group")
    shared = len(full) == 3 and x.shape == (full[0], 1, k)
    if shared:
        # scores shared along the middle axis: the kernel reuses them per row
        xs, ys, ws = x.value[:, 0], yb, wg
    else:
        xs, ys, ws = xb.reshape(-1, k), yb.reshape(-1, 1, k), wg.reshape(-1, 1)
    s, dxs = kernels.rank_loss(*(np.ascontiguousarray(a, dtype=np.float64) for a in (xs, ys, ws)))
    loss = s / total
    dxb = (dxs.reshape(x.shape) if shared else dxs.reshape(full)) / total

    def back(g):
        return (_unbroadcast(g * dxb, x.shape),)

    return Tensor(loss, (x,), back)


# --------------------------------------------------------------------------
# sequence ops


def gated_scan(a, u) -> Tensor:
    """h_t = a_t * h_{t-1} + (1 - a_t) * u_t along axis 1, h_{-1} = 0."""
    a, u = constant(a), constant(u)
    if a.shape != u.shape or a.value.ndim != 3:
        raise InvalidInputError(f"gated_scan needs equal (B, l, d) inputs, got {a.shape}, {u.shape}")
    av = np.ascontiguousarray(a.value)
    uv = np.ascontiguousarray(u.value)
    h = kernels.scan_forward(av, uv)

    def back(g):
        ga, gu = kernels.scan_backward(av, uv, h, np.ascontiguousarray(g))
        return ga, gu

    return Tensor(h, (a, u), back)


def sparse_attention(q, k, v, idx) -> Tensor:
    """Softmax attention of each query over the key positions listed in ``idx``."""
    q, k, v = constant(q), constant(k), constant(v)
    if q.shape != k.shape or q.shape[:2] != v.shape[:2]:
        raise InvalidInputError(f"attention shape mismatch: {q.shape}, {k.shape}, {v.shape}")
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    sc = 1.0 / math.sqrt(q.shape[-1])
    qv, kv, vv = (np.ascontiguousarray(t.value) for t in (q, k, v))
    out, probs = kernels.attn_forward(qv, kv, vv, idx, sc)

    def back(g):
        return kernels.attn_backward(qv, kv, vv, idx, probs, np.ascontiguousarray(g), sc)

    t = Tensor(out, (q, k, v), back)
    return t


def finite_difference_grad(f, arrays: list[np.ndarray], eps: float = 1e-5, coords=None) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. each array (mutated in place)."""
    out = []
    for i, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        which = range(flat.size) if coords is None else coords[i]
        for j in which:
            old = flat[j]
            flat[j] = old + eps
            fp = f()
            flat[j] = old - eps
            fm = f()
            flat[j] = old
            gflat[j] = (fp - fm) / (2 * eps)
        out.append(g)
    return out
