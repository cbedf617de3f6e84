"""Dense float64 tensors and a define-by-run reverse-mode autodiff tape.

A :class:`Tensor` wraps an immutable row-major float64 array.  Tensors created
through :meth:`Tape.watch` are *tracked*; every primitive applied to a tracked
tensor appends a node to the same tape.  :func:`backward` walks the tape once in
reverse and returns gradients for the watched leaves.

Untracked tensors behave as constants, so the same primitives serve plain
inference code (no tape, no bookkeeping).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor", "Tape", "Node", "backward", "grad",
    "add", "sub", "mul", "neg", "matmul", "conv1d", "relu", "exp", "log",
    "softmax", "log_softmax", "sum", "mean", "l2_normalize",
    "global_avg_pool", "transpose", "reshape", "concat",
    "numeric_grad", "rel_error",
]


def _frozen(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.flags.writeable:
        if not arr.flags.owndata:
            arr = arr.copy()
        arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array, optionally recorded on a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = _frozen(np.array(data, dtype=np.float64))
        self.tape = tape
        self.node = node

    @classmethod
    def _wrap(cls, arr, tape=None, node=None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _frozen(arr)
        t.tape = tape
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Node:
    op: str
    inputs: tuple[int | None, ...]
    value: np.ndarray
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None


class Tape:
    """Ordered record of operations; node ids are list positions, so inputs always precede outputs."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def watch(self, data) -> Tensor:
        """Register ``data`` as a differentiable leaf."""
        arr = data.data if isinstance(data, Tensor) else data
        t = Tensor(arr)
        t.tape = self
        t.node = len(self.nodes)
        self.nodes.append(Node("leaf", (), t.data))
        return t

    def _record(self, op, inputs, value, vjp) -> Tensor:
        node = len(self.nodes)
        self.nodes.append(Node(op, tuple(x.node if x.tracked else None for x in inputs), value, vjp))
        return Tensor._wrap(value, self, node)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("operands are recorded on different tapes")
            tape = x.tape
    return tape


def _emit(op, inputs, value, vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._wrap(value)
    return tape._record(op, inputs, value, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    av, bv = a.data, b.data
    return _emit("mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    av = a.data
    return _emit("log", (a,), np.log(av), lambda g: (g / av,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes),
                 lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", ts, out, lambda g: np.split(g, cuts, axis=axis))


def global_avg_pool(a) -> Tensor:
    """Mean over the trailing (time) axis."""
    return mean(a, axis=-1)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.data, b.data
    return _emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 1-D cross-correlation.

    ``x`` is ``(C_in, T)`` or batched ``(N, C_in, T)``; ``w`` is ``(C_out, C_in, K)``;
    optional ``b`` is ``(C_out,)``.  Output length is ``(T - K) // stride + 1``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if w.ndim != 3:
        raise ShapeError(f"kernel must be (C_out, C_in, K), got {w.shape}")
    single = x.ndim == 2
    xv = x.data[None] if single else x.data
    if xv.ndim != 3:
        raise ShapeError(f"input must be (C, T) or (N, C, T), got {x.shape}")
    n, c_in, t = xv.shape
    c_out, wc, k = w.shape
    if wc != c_in:
        raise ShapeError(f"kernel expects {wc} input channels, input has {c_in}")
    if k > t:
        raise ShapeError(f"kernel length {k} exceeds input length {t}")
    t_out = (t - k) // stride + 1

    win = sliding_window_view(xv, k, axis=2)[:, :, ::stride][:, :, :t_out]  # (N, C, T', K)
    cols = win.transpose(0, 2, 1, 3).reshape(n * t_out, c_in * k)
    wmat = w.data.reshape(c_out, c_in * k)
    out = (cols @ wmat.T).reshape(n, t_out, c_out).transpose(0, 2, 1)
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"bias must be ({c_out},), got {b.shape}")
        out = out + b.data[None, :, None]
        inputs.append(b)
    out = np.ascontiguousarray(out[0] if single else out)

    def vjp(g):
        g3 = g[None] if single else g
        g2 = g3.transpose(0, 2, 1).reshape(n * t_out, c_out)
        dw = (g2.T @ cols).reshape(w.shape)
        if stride == 1:
            # full correlation of the padded output gradient with the flipped kernel
            gp = np.pad(g3, ((0, 0), (0, 0), (k - 1, k - 1)))
            gcols = sliding_window_view(gp, k, axis=2).transpose(0, 2, 1, 3).reshape(n * t, c_out * k)
            wflip = w.data[:, :, ::-1].transpose(0, 2, 1).reshape(c_out * k, c_in)
            dx = (gcols @ wflip).reshape(n, t, c_in).transpose(0, 2, 1)
        else:
            dcols = (g2 @ wmat).reshape(n, t_out, c_in, k)
            dx = np.zeros_like(xv)
            span = stride * (t_out - 1) + 1
            for j in range(k):
                dx[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        grads = [dx[0] if single else dx, dw]
        if b is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    return _emit("conv1d", inputs, out, vjp)


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), s, vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _emit("log_softmax", (a,), out,
                 lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.  Zero slices raise DomainError."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DomainError("cannot L2-normalize a zero vector (collapsed embedding?)")
    u = a.data / norm

    def vjp(g):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / norm,)

    return _emit("l2_normalize", (a,), u, vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, root: Tensor, seed=None) -> dict[int, np.ndarray]:
    """Gradients of scalar ``root`` with respect to every watched leaf that it depends on.

    Returns a mapping from leaf node id to gradient array.  ``seed`` overrides the
    upstream gradient (defaults to 1.0).
    """
    if root.tape is not tape or root.node is None:
        raise ContractError("root is not recorded on this tape")
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    adj: dict[int, np.ndarray] = {root.node: np.ones_like(root.data) if seed is None
                                  else np.asarray(seed, dtype=np.float64).reshape(root.shape)}
    leaves: dict[int, np.ndarray] = {}
    for idx in range(root.node, -1, -1):
        g = adj.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.vjp is None:
            leaves[idx] = g
            continue
        for src, gi in zip(node.inputs, node.vjp(g)):
            if src is None or gi is None:
                continue
            if src in adj:
                adj[src] = adj[src] + gi
            else:
                adj[src] = gi
    return leaves


def grad(root: Tensor, *wrt: Tensor) -> list[np.ndarray]:
    """Convenience wrapper: gradients of ``root`` for the given leaves (zeros if unreachable)."""
    g = backward(root.tape, root)
    return [g.get(t.node, np.zeros(t.shape)) for t in wrt]


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6,
                 coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``.

    With ``coords`` (flat indices) only those entries are differenced and a 1-D
    array in the same order is returned.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        out.append((fp - fm) / (2 * eps))
    out = np.array(out)
    return out.reshape(x.shape) if coords is None else out


def rel_error(analytic, numeric) -> float:
    """Norm-wise relative error ``||a - n|| / max(||a||, ||n||)`` (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)
