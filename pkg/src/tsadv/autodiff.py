"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Each :class:`Graph` owns a tape of :class:`Tensor` nodes recorded in creation
order, which is also a topological order of the computation.  A single
:func:`backward` pass walks the tape once and returns gradients for *every*
leaf, so parameters and inputs are differentiated together.  Graphs are
rebuilt per forward pass (dynamic tape) and are confined to one thread;
independent graphs may live on different threads.

All arithmetic is 64-bit.  Ops validate shapes eagerly and raise
:class:`ShapeError` naming the op and offending dimensions.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "ShapeError",
    "backward",
    "grad_check",
    "fd_safety_margin",
    "add",
    "sub",
    "mul",
    "matmul",
    "sigmoid",
    "tanh",
    "relu",
    "conv1d",
    "maxpool1d",
    "concat",
    "slice_",
    "reshape",
    "mean",
    "sum_",
    "square",
    "log",
    "clip",
]


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested op."""


class Tensor:
    """A node in a computation graph wrapping a float64 ndarray.

    Tensors are created through :meth:`Graph.leaf` or by applying ops to
    existing tensors; they are never constructed directly.  ``node_id`` is
    the position on the owning graph's tape.  ``grad`` is populated for
    leaves by :func:`backward`.
    """

    __slots__ = ("graph", "node_id", "kind", "data", "grad", "is_leaf",
                 "meta", "_parents", "_backward")

    def __init__(self, graph, node_id, kind, data, parents, backward_fn,
                 is_leaf=False):
        self.graph = graph
        self.node_id = node_id
        self.kind = kind
        self.data = data
        self.grad = None
        self.is_leaf = is_leaf
        self.meta = None
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(kind={self.kind!r}, shape={self.data.shape}, id={self.node_id})"

    # Operator sugar; scalars and ndarrays are lifted to leaves.
    def __add__(self, other):
        return add(self, _lift(self.graph, other))

    def __radd__(self, other):
        return add(_lift(self.graph, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self.graph, other))

    def __rsub__(self, other):
        return sub(_lift(self.graph, other), self)

    def __mul__(self, other):
        return mul(self, _lift(self.graph, other))

    def __rmul__(self, other):
        return mul(_lift(self.graph, other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(self.graph, other))

    def __neg__(self):
        return mul(self, _lift(self.graph, -1.0))

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Graph:
    """Recording tape for one forward computation.

    A graph and its tensors must stay on the thread that built them.  When
    ``check_finite`` is set, every recorded op asserts its output is finite,
    which pins down the op that first produced a NaN/Inf.
    """

    def __init__(self, check_finite=False):
        self._tape: list[Tensor] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self._tape)

    def leaf(self, data) -> Tensor:
        """Record an input node (parameter, input batch, or constant).

        The array is used as-is (no copy for float64 input); callers must not
        mutate it while the graph is alive.
        """
        arr = np.asarray(data, dtype=np.float64)
        t = Tensor(self, len(self._tape), "leaf", arr, (), None, is_leaf=True)
        self._tape.append(t)
        return t

    def _record(self, kind, data, parents, backward_fn) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"{kind}: non-finite value in forward output")
        t = Tensor(self, len(self._tape), kind, data, parents, backward_fn)
        self._tape.append(t)
        return t


def _lift(graph: Graph, value) -> Tensor:
    if isinstance(value, Tensor):
        if value.graph is not graph:
            raise ValueError("operands belong to different graphs")
        return value
    return graph.leaf(value)


def _pair(op: str, a: Tensor, b: Tensor) -> Graph:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError(f"{op}: operands must be Tensors")
    if a.graph is not b.graph:
        raise ValueError(f"{op}: operands belong to different graphs")
    return a.graph


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _pair("add", a, b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bw(grad, acc):
        acc(a, _unbroadcast(grad, a.shape))
        acc(b, _unbroadcast(grad, b.shape))

    return g._record("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    g = _pair("sub", a, b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bw(grad, acc):
        acc(a, _unbroadcast(grad, a.shape))
        acc(b, _unbroadcast(-grad, b.shape))

    return g._record("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    g = _pair("mul", a, b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def bw(grad, acc):
        acc(a, _unbroadcast(grad * b.data, a.shape))
        acc(b, _unbroadcast(grad * a.data, b.shape))

    return g._record("mul", out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    g = _pair("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dims {a.shape[1]} and {b.shape[0]} differ "
            f"(shapes {a.shape} @ {b.shape})")
    out = a.data @ b.data

    def bw(grad, acc):
        acc(a, grad @ b.data.T)
        acc(b, a.data.T @ grad)

    return g._record("matmul", out, (a, b), bw)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def bw(grad, acc):
        acc(a, 2.0 * a.data * grad)

    return a.graph._record("square", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(grad, acc):
        acc(a, grad / a.data)

    return a.graph._record("log", out, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through the interior (inclusive)."""
    out = np.clip(a.data, lo, hi)

    def bw(grad, acc):
        acc(a, grad * ((a.data >= lo) & (a.data <= hi)))

    t = a.graph._record("clip", out, (a,), bw)
    t.meta = (lo, hi)
    return t


# ---------------------------------------------------------------------------
# activations


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(grad, acc):
        acc(a, grad * out * (1.0 - out))

    return a.graph._record("sigmoid", out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(grad, acc):
        acc(a, grad * (1.0 - out * out))

    return a.graph._record("tanh", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(grad, acc):
        acc(a, grad * (a.data > 0.0))

    return a.graph._record("relu", out, (a,), bw)


# ---------------------------------------------------------------------------
# convolution / pooling


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Valid 1-D convolution (cross-correlation).

    x: (B, T, C), w: (K, C, F) -> (B, T-K+1, F).
    """
    g = _pair("conv1d", x, w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D input and kernel, got {x.shape}, {w.shape}")
    B, T, C = x.shape
    K, Ck, F = w.shape
    if Ck != C:
        raise ShapeError(f"conv1d: channel mismatch, input has {C}, kernel has {Ck}")
    if T < K:
        raise ShapeError(f"conv1d: input length {T} shorter than kernel {K}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=1)  # (B, L, C, K)
    out = np.einsum("blck,kcf->blf", win, w.data)

    def bw(grad, acc):
        gw = np.einsum("blck,blf->kcf", win, grad)
        L = T - K + 1
        gpad = np.zeros((B, L + 2 * (K - 1), F))
        gpad[:, K - 1:K - 1 + L] = grad
        gwin = np.lib.stride_tricks.sliding_window_view(gpad, K, axis=1)  # (B, T, F, K)
        gx = np.einsum("btfk,kcf->btc", gwin, w.data[::-1])
        acc(x, gx)
        acc(w, gw)

    return g._record("conv1d", out, (x, w), bw)


def maxpool1d(x: Tensor, width: int) -> Tensor:
    """Non-overlapping 1-D max pool over the time axis; remainder steps drop.

    x: (B, T, F) -> (B, T // width, F).
    """
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d: expected 3-D input, got {x.shape}")
    B, T, F = x.shape
    if width < 1 or T < width:
        raise ShapeError(f"maxpool1d: width {width} invalid for length {T}")
    To = T // width
    xr = x.data[:, :To * width].reshape(B, To, width, F)
    arg = xr.argmax(axis=2)
    out = np.take_along_axis(xr, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def bw(grad, acc):
        gr = np.zeros((B, To, width, F))
        np.put_along_axis(gr, arg[:, :, None, :], grad[:, :, None, :], axis=2)
        gx = np.zeros((B, T, F))
        gx[:, :To * width] = gr.reshape(B, To * width, F)
        acc(x, gx)

    t = x.graph._record("maxpool1d", out, (x,), bw)
    t.meta = width
    return t


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors given")
    g = tensors[0].graph
    for t in tensors[1:]:
        _pair("concat", tensors[0], t)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(grad, acc):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * grad.ndim
            idx[axis] = slice(lo, hi)
            acc(t, grad[tuple(idx)])

    return g._record("concat", out, tuple(tensors), bw)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(f"slice: [{start}, {stop}) out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def bw(grad, acc):
        gx = np.zeros(x.shape)
        gx[idx] = grad
        acc(x, gx)

    return x.graph._record("slice", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def bw(grad, acc):
        acc(x, grad.reshape(x.shape))

    return x.graph._record("reshape", out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bw(grad, acc):
        acc(x, np.full(x.shape, float(grad)))

    return x.graph._record("sum", out, (x,), bw)


def mean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean())
    n = x.size

    def bw(grad, acc):
        acc(x, np.full(x.shape, float(grad) / n))

    return x.graph._record("mean", out, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Returns a map node-id -> gradient for every leaf on the graph; leaves the
    loss does not depend on get exact zeros.  Leaf ``grad`` fields are
    populated as a side effect.  The sweep is a pure, fixed-order walk of the
    tape, so repeated calls are bit-identical.
    """
    if loss.graph is not graph:
        raise ValueError("backward: loss does not belong to this graph")
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(graph._tape)
    grads[loss.node_id] = np.ones_like(loss.data)

    def acc(t: Tensor, g: np.ndarray):
        cur = grads[t.node_id]
        grads[t.node_id] = g if cur is None else cur + g

    for t in reversed(graph._tape[:loss.node_id + 1]):
        g = grads[t.node_id]
        if g is None or t._backward is None:
            continue
        t._backward(g, acc)

    result: dict[int, np.ndarray] = {}
    for t in graph._tape:
        if t.is_leaf:
            g = grads[t.node_id]
            t.grad = np.zeros_like(t.data) if g is None else g
            result[t.node_id] = t.grad
    return result


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f`` at ``point`` with central FD.

    ``f`` receives a leaf tensor and must build a scalar loss on that
    tensor's graph (fixed inputs may be added as further leaves via
    ``t.graph.leaf``).  Returns the max over elements of
    ``|analytic - fd| / max(1, |fd|)``;  non-finite FD or analytic values
    come back as ``inf`` so they always read as failures.
    """
    point = np.asarray(point, dtype=np.float64)
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    g = Graph()
    p = g.leaf(point)
    out = f(p)
    if out.size != 1:
        raise ValueError("grad_check: f must produce a scalar")
    analytic = backward(g, out)[p.node_id]

    def eval_at(arr: np.ndarray) -> float:
        gg = Graph()
        return float(f(gg.leaf(arr)).data)

    work = point.copy()
    flat = work.ravel()
    aflat = analytic.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = eval_at(work)
        flat[i] = orig - h
        lo = eval_at(work)
        flat[i] = orig
        fd = (hi - lo) / (2.0 * h)
        if not (np.isfinite(fd) and np.isfinite(aflat[i])):
            return math.inf
        err = abs(aflat[i] - fd) / max(1.0, abs(fd))
        if err > worst:
            worst = err
    return worst


_KINK_OPS = ("relu", "maxpool1d", "clip")


def fd_safety_margin(graph: Graph) -> float:
    """Distance of the recorded forward pass from its nearest kink.

    Central differences are only meaningful when no relu / maxpool / clip
    switches branch inside the FD interval; callers checking full models
    resample configurations whose margin is too small.  Returns ``inf`` for
    graphs without kinked ops.
    """
    margin = math.inf
    for t in graph._tape:
        if t.kind == "relu":
            margin = min(margin, float(np.abs(t._parents[0].data).min()))
        elif t.kind == "maxpool1d":
            x = t._parents[0]
            B, T, F = x.shape
            width = t.meta
            To = t.shape[1]
            if width >= 2 and To > 0:
                xr = x.data[:, :To * width].reshape(B, To, width, F)
                top2 = np.sort(xr, axis=2)[:, :, -2:, :]
                margin = min(margin, float((top2[:, :, 1] - top2[:, :, 0]).min()))
        elif t.kind == "clip":
            lo, hi = t.meta
            src = t._parents[0].data
            margin = min(margin, float(np.abs(src - lo).min()),
                         float(np.abs(src - hi).min()))
    return margin
