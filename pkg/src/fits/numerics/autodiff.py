"""Tape-based reverse-mode differentiation over numpy float64 arrays.

A :class:`Graph` records every operation as a :class:`Node` in insertion
order, which is also a valid topological order.  Values are computed eagerly
when a node is added; :meth:`Graph.forward` re-evaluates the tape from the
current leaf buffers (parameters are bound by reference, so in-place edits are
picked up), and :meth:`Graph.backward` accumulates exact gradients in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from fits.errors import ShapeError

LOG_CLAMP = 1e-12
NORM_CLAMP = 1e-12
LN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _index_add(n: int, index, values: np.ndarray) -> np.ndarray:
    """``out[index] += values`` into a fresh ``(n, ...)`` array.

    Same result as ``np.add.at`` for integer indices, computed with
    ``bincount``, which is far faster.
    """
    index = np.asarray(index, dtype=np.int64)
    tail = values.shape[index.ndim:]
    width = int(np.prod(tail, dtype=np.int64))
    flat = (index.reshape(-1, 1) * width + np.arange(width)).reshape(-1)
    summed = np.bincount(flat, weights=values.reshape(-1), minlength=n * width)
    return summed.reshape((n,) + tail)


# ---------------------------------------------------------------------------
# op kernels: forward(*values, **attrs) -> value
#             backward(g, out, *values, **attrs) -> tuple of input grads
# ---------------------------------------------------------------------------


def _add_f(a, b):
    return a + b


def _add_b(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_f(a, b):
    return a - b


def _sub_b(g, out, a, b):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_f(a, b):
    return a * b


def _mul_b(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_f(a, c):
    return a * c


def _scale_b(g, out, a, c):
    return (g * c,)


def _matmul_f(a, b):
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _matmul_b(g, out, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = g2[..., None]
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    if b2.ndim == 2 and a2.ndim > 2:
        # batch @ matrix: fold the batch axes instead of summing per-batch outer products
        gb = a2.reshape(-1, a2.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
    else:
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
    gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
    return ga, gb


def _concat_f(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_b(g, out, *xs, axis):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _slice_f(a, key):
    return a[key]


def _slice_b(g, out, a, key):
    full = np.zeros_like(a)
    full[key] = g
    return (full,)


def _gather_f(a, index):
    return a[index]


def _gather_b(g, out, a, index):
    return (_index_add(a.shape[0], index, g),)


def _scatter_add_f(x, index, n):
    return _index_add(n, index, x)


def _scatter_add_b(g, out, x, index, n):
    return (g[index],)


def _reshape_f(a, shape):
    return a.reshape(shape)


def _reshape_b(g, out, a, shape):
    return (g.reshape(a.shape),)


def _transpose_f(a, axes):
    return a.transpose(axes)


def _transpose_b(g, out, a, axes):
    return (g.transpose(np.argsort(axes)),)


def _relu_f(a):
    return np.maximum(a, 0.0)


def _relu_b(g, out, a):
    return (g * (a > 0),)


def _sigmoid_f(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sigmoid_b(g, out, a):
    return (g * out * (1.0 - out),)


def _log_f(a):
    return np.log(np.maximum(a, LOG_CLAMP))


def _log_b(g, out, a):
    return (g / np.maximum(a, LOG_CLAMP),)


def _softmax_f(a, mask=None):
    if mask is not None:
        a = np.where(mask, a, -np.inf)
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a - m)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def _softmax_b(g, out, a, mask=None):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _segment_softmax_f(x, segments, n):
    m = np.full((n,) + x.shape[1:], -np.inf)
    np.maximum.at(m, segments, x)
    e = np.exp(x - m[segments])
    s = _index_add(n, segments, e)
    return e / s[segments]


def _segment_softmax_b(g, out, x, segments, n):
    s = _index_add(n, segments, g * out)
    return (out * (g - s[segments]),)


def _layer_norm_f(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def _layer_norm_b(g, out, x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mu) * inv
    gxhat = g * gamma
    gx = inv * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def _embedding_f(table, ids):
    return table[ids]


def _embedding_b(g, out, table, ids):
    return (_index_add(table.shape[0], ids, g),)


def _mean_pool_f(x, pool):
    return pool @ x


def _mean_pool_b(g, out, x, pool):
    return (pool.T @ g,)


def _norms(a, b):
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    return na, nb, np.maximum(na, NORM_CLAMP), np.maximum(nb, NORM_CLAMP)


def _cosine_f(a, b):
    _, _, na, nb = _norms(a, b)
    return ((a * b).sum(axis=-1, keepdims=True) / (na * nb))[..., 0]


def _cosine_b(g, out, a, b):
    ra, rb, na, nb = _norms(a, b)
    dot = (a * b).sum(axis=-1, keepdims=True)
    g = g[..., None]
    # the clamped norm is constant below the clamp threshold
    da = np.where(ra > NORM_CLAMP, a / na, 0.0)
    db = np.where(rb > NORM_CLAMP, b / nb, 0.0)
    ga = g * (b / (na * nb) - dot / (na * na * nb) * da)
    gb = g * (a / (na * nb) - dot / (na * nb * nb) * db)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _dot_f(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"dot: {a.shape} . {b.shape}")
    return (a * b).sum(axis=-1)


def _dot_b(g, out, a, b):
    g = g[..., None]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _sum_f(a, axis=None):
    return np.asarray(a.sum(axis=axis), dtype=np.float64)


def _sum_b(g, out, a, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _mean_f(a, axis=None):
    return np.asarray(a.mean(axis=axis), dtype=np.float64)


def _mean_b(g, out, a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape).copy(),)


def _logsumexp(a):
    m = a.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True)))[..., 0]


def _cross_entropy_f(logits, targets):
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return _logsumexp(logits) - picked


def _cross_entropy_b(g, out, logits, targets):
    p = _softmax_f(logits)
    np.put_along_axis(
        p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1
    )
    return (p * g[..., None],)


OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_f, _add_b),
    "sub": (_sub_f, _sub_b),
    "mul": (_mul_f, _mul_b),
    "scale": (_scale_f, _scale_b),
    "matmul": (_matmul_f, _matmul_b),
    "concat": (_concat_f, _concat_b),
    "slice": (_slice_f, _slice_b),
    "gather": (_gather_f, _gather_b),
    "scatter_add": (_scatter_add_f, _scatter_add_b),
    "reshape": (_reshape_f, _reshape_b),
    "transpose": (_transpose_f, _transpose_b),
    "relu": (_relu_f, _relu_b),
    "sigmoid": (_sigmoid_f, _sigmoid_b),
    "log": (_log_f, _log_b),
    "softmax": (_softmax_f, _softmax_b),
    "segment_softmax": (_segment_softmax_f, _segment_softmax_b),
    "layer_norm": (_layer_norm_f, _layer_norm_b),
    "embedding": (_embedding_f, _embedding_b),
    "mean_pool": (_mean_pool_f, _mean_pool_b),
    "cosine_similarity": (_cosine_f, _cosine_b),
    "dot": (_dot_f, _dot_b),
    "sum": (_sum_f, _sum_b),
    "mean": (_mean_f, _mean_b),
    "cross_entropy": (_cross_entropy_f, _cross_entropy_b),
}


class Node:
    __slots__ = ("graph", "index", "op", "inputs", "attrs", "value", "grad", "name")

    def __init__(self, graph, index, op, inputs, attrs, value, name=None):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({self.index}, {label}, shape={self.shape})"

    def _wrap(self, other):
        return other if isinstance(other, Node) else self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._wrap(other))

    def __radd__(self, other):
        return self.graph.add(self._wrap(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self._wrap(other))

    def __rsub__(self, other):
        return self.graph.sub(self._wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._wrap(other))

    def __getitem__(self, key):
        return self.graph.slice(self, key)


class Graph:
    """Append-only computation record with named parameter leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def __len__(self):
        return len(self.nodes)

    # -- leaves -------------------------------------------------------------

    def _leaf(self, value, name=None) -> Node:
        node = Node(self, len(self.nodes), "leaf", (), {}, value, name)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self._leaf(np.asarray(value, dtype=np.float64))

    def param(self, name: str, array: np.ndarray) -> Node:
        """Bind ``array`` by reference; repeated names return the same leaf."""
        node = self.params.get(name)
        if node is None:
            if array.dtype != np.float64:
                raise ShapeError(f"parameter {name} must be float64")
            node = self._leaf(array, name)
            self.params[name] = node
        return node

    # -- op application -----------------------------------------------------

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        fwd = OPS[op][0]
        try:
            value = fwd(*(x.value for x in inputs), **attrs)
        except ShapeError:
            raise
        except (ValueError, IndexError) as exc:
            shapes = [x.shape for x in inputs]
            raise ShapeError(f"{op}: incompatible shapes {shapes}: {exc}") from exc
        node = Node(self, len(self.nodes), op, inputs, attrs, value)
        self.nodes.append(node)
        return node

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def scale(self, a, c: float):
        return self.apply("scale", a, c=float(c))

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def concat(self, xs: Sequence[Node], axis: int = -1):
        return self.apply("concat", *xs, axis=axis)

    def slice(self, a, key):
        return self.apply("slice", a, key=key)

    def gather(self, a, index):
        return self.apply("gather", a, index=np.asarray(index, dtype=np.int64))

    def scatter_add(self, x, index, n: int):
        return self.apply("scatter_add", x, index=np.asarray(index, dtype=np.int64), n=n)

    def reshape(self, a, shape):
        return self.apply("reshape", a, shape=tuple(shape))

    def transpose(self, a, axes):
        return self.apply("transpose", a, axes=tuple(axes))

    def relu(self, a):
        return self.apply("relu", a)

    def sigmoid(self, a):
        return self.apply("sigmoid", a)

    def log(self, a):
        """Natural log with the argument clamped to at least 1e-12."""
        return self.apply("log", a)

    def softmax(self, a, mask=None):
        """Softmax over the last axis; ``mask`` (True = keep) zeroes entries."""
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
        return self.apply("softmax", a, mask=mask)

    def segment_softmax(self, x, segments, n: int):
        """Softmax over groups of rows sharing a segment id (axis 0)."""
        return self.apply(
            "segment_softmax", x, segments=np.asarray(segments, dtype=np.int64), n=n
        )

    def layer_norm(self, x, gamma, beta):
        return self.apply("layer_norm", x, gamma, beta)

    def embedding(self, table, ids):
        return self.apply("embedding", table, ids=np.asarray(ids, dtype=np.int64))

    def mean_pool(self, x, spans: Iterable[tuple[int, int]]):
        """Mean of rows ``x[s:e]`` for each half-open span; one output row each."""
        spans = list(spans)
        rows = x.shape[0]
        pool = np.zeros((len(spans), rows))
        for i, (s, e) in enumerate(spans):
            if not 0 <= s < e <= rows:
                raise ShapeError(f"mean_pool span {(s, e)} outside {rows} rows")
            pool[i, s:e] = 1.0 / (e - s)
        return self.apply("mean_pool", x, pool=pool)

    def cosine_similarity(self, a, b):
        return self.apply("cosine_similarity", a, b)

    def dot(self, a, b):
        return self.apply("dot", a, b)

    def sum(self, a, axis=None):
        return self.apply("sum", a, axis=axis)

    def mean(self, a, axis=None):
        return self.apply("mean", a, axis=axis)

    def cross_entropy(self, logits, targets):
        """Per-row ``logsumexp(logits) - logits[target]``."""
        return self.apply(
            "cross_entropy", logits, targets=np.asarray(targets, dtype=np.int64)
        )

    def attention(self, q, k, v, mask=None):
        """Scaled dot-product attention over the last two axes."""
        scores = self.scale(
            self.matmul(q, self.transpose(k, _swap_last(k.value.ndim))),
            1.0 / np.sqrt(q.shape[-1]),
        )
        weights = self.softmax(scores, mask=mask)
        return self.matmul(weights, v), weights

    # -- evaluation ---------------------------------------------------------

    def downstream(self, leaves: Iterable[Node]) -> list[Node]:
        """Non-leaf nodes whose value depends on any of ``leaves``, in order."""
        dirty = {n.index for n in leaves}
        out = []
        for node in self.nodes:
            if node.op != "leaf" and any(x.index in dirty for x in node.inputs):
                dirty.add(node.index)
                out.append(node)
        return out

    def forward(self, nodes: Sequence[Node] | None = None) -> list[np.ndarray]:
        """Re-evaluate ``nodes`` (default: the whole tape) from current leaves."""
        for node in self.nodes if nodes is None else nodes:
            if node.op == "leaf":
                continue
            node.value = OPS[node.op][0](*(x.value for x in node.inputs), **node.attrs)
        return [n.value for n in self.nodes]

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node; return parameter grads."""
        if loss.value.size != 1 or loss.value.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got {loss.shape}")
        for node in self.nodes:
            node.grad = None
        for node in self.params.values():
            node.grad = np.zeros_like(node.value)
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            if node.grad is None or node.op == "leaf":
                continue
            grads = OPS[node.op][1](
                node.grad, node.value, *(x.value for x in node.inputs), **node.attrs
            )
            for x, gx in zip(node.inputs, grads):
                if gx is None:
                    continue
                if x.grad is None:
                    x.grad = np.array(gx, dtype=np.float64)
                else:
                    x.grad = x.grad + gx
        return {name: node.grad for name, node in self.params.items()}


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)
