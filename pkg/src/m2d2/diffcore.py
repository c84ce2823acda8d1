"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents together with a vector-Jacobian rule;
:func:`backward` walks the recorded graph in reverse topological order.
Graphs are rebuilt from fresh leaves on every optimisation step, so there is
no global tape to clear.
"""

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DecompositionError, OracleError, ShapeError

PIVOT_TOL = 1e-12
SYMMETRY_TOL = 1e-10

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph edges (inference only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array plus the graph edges that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op):
    """Build an output node, keeping only parents that need gradients."""
    if not _grad_enabled():
        return Tensor(data, op=op)
    live = tuple((p, rule) for p, rule in parents if p.requires_grad)
    return Tensor(data, requires_grad=bool(live), _parents=live, op=op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(
        a.data + b.data,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _node(
        a.data - b.data,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _node(
        a.data * b.data,
        (
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _node(
        out,
        (
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)),
        ),
        "div",
    )


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, ((a, lambda g: -g),), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, ((a, lambda g: g * out),), "exp")


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), ((a, lambda g: g / a.data),), "log")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, ((a, lambda g: g * out * (1.0 - out)),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, ((a, lambda g: g * (1.0 - out * out)),), "tanh")


def softplus(a):
    a = as_tensor(a)
    return _node(np.logaddexp(0.0, a.data), ((a, lambda g: g * _sigmoid(a.data)),), "softplus")


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, ((a, lambda g: 2.0 * g * a.data),), "square")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, ((a, lambda g: 0.5 * g / out),), "sqrt")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), ((a, lambda g: g * inside),), "clip")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, a.shape).copy()

    return _node(out, ((a, rule),), "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axes, keepdims) / float(count)


# ---------------------------------------------------------------- structural


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(out, ((a, lambda g: g.reshape(a.shape)),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes)
    return _node(np.transpose(a.data, axes), ((a, lambda g: np.transpose(g, inverse)),), "transpose")


def swap_last(a):
    """Transpose the trailing two axes (batched matrix transpose)."""
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def slice_(a, index):
    a = as_tensor(a)
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def rule(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return full

    return _node(a.data[index], ((a, rule),), "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} do not conform")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    parents = []
    for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * ndim
        sl[ax] = slice(lo, hi)
        parents.append((t, lambda g, sl=tuple(sl): g[sl]))
    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(parents), "concat")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand in shapes {a.shape} and {b.shape}")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} differ") from None
    return _node(
        out,
        (
            (a, lambda g: _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)),
            (b, lambda g: _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)),
        ),
        "matmul",
    )


# ---------------------------------------------------------------- conv / pool


def conv2d(x, w):
    """Stride-1 valid cross-correlation of [N,C,H,W] with [F,C,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    kh, kw = w.shape[2], w.shape[3]
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def grad_w(g):
        return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))

    def grad_x(g):
        padded = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # N,F,H,W,kh,kw
        flipped = w.data[:, :, ::-1, ::-1]
        return np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)

    return _node(np.ascontiguousarray(out), ((x, grad_x), (w, grad_w)), "conv2d")


def maxpool2x2(x):
    """2x2 non-overlapping max pool over the trailing two axes (floor on odd sizes)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2x2: spatial extent of {x.shape} is below 2")
    blocks = (
        x.data[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        onehot = np.zeros(blocks.shape)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        full = np.zeros(x.shape)
        full[:, :, : 2 * h2, : 2 * w2] = (
            onehot.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return full

    return _node(out, ((x, rule),), "maxpool2x2")


# ---------------------------------------------------------------- linear algebra


def _check_spd_input(k):
    if k.ndim < 2 or k.shape[-1] != k.shape[-2]:
        raise ShapeError(f"expected square matrix, got shape {k.shape}")
    asym = np.max(np.abs(k - np.swapaxes(k, -1, -2))) if k.size else 0.0
    if asym > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(k)))):
        raise ContractError(f"matrix is not symmetric (max asymmetry {asym:.3e})")


def _cholesky(k):
    n = k.shape[-1]
    lower = np.zeros_like(k)
    for j in range(n):
        row = lower[..., j, :j]
        d = k[..., j, j] - np.sum(row * row, axis=-1)
        if np.any(d <= PIVOT_TOL):
            raise DecompositionError(j, np.min(d))
        ljj = np.sqrt(d)
        lower[..., j, j] = ljj
        if j + 1 < n:
            below = k[..., j + 1 :, j] - np.einsum("...ik,...k->...i", lower[..., j + 1 :, :j], row)
            lower[..., j + 1 :, j] = below / ljj[..., None]
    return lower


def _forward_sub(lower, b):
    x = np.zeros_like(b)
    for i in range(lower.shape[-1]):
        acc = b[..., i, :] - np.einsum("...k,...kj->...j", lower[..., i, :i], x[..., :i, :])
        x[..., i, :] = acc / lower[..., i, i][..., None]
    return x


def _back_sub_transposed(lower, b):
    """Solve Lᵀ x = b given lower-triangular L."""
    n = lower.shape[-1]
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        acc = b[..., i, :] - np.einsum("...k,...kj->...j", lower[..., i + 1 :, i], x[..., i + 1 :, :])
        x[..., i, :] = acc / lower[..., i, i][..., None]
    return x


def _chol_solve(lower, b):
    vector = b.ndim == lower.ndim - 1
    rhs = b[..., None] if vector else b
    x = _back_sub_transposed(lower, _forward_sub(lower, rhs))
    return x[..., 0] if vector else x


def cholesky(k):
    """Lower-triangular L with L Lᵀ = K; batched over leading axes. Not differentiable."""
    k = as_tensor(k).data
    _check_spd_input(k)
    return Tensor(_cholesky(k))


def triangular_solve(lower, b, transpose=False):
    """Solve L x = b (or Lᵀ x = b) by substitution."""
    lower, b = as_tensor(lower).data, as_tensor(b).data
    vector = b.ndim == lower.ndim - 1
    rhs = b[..., None] if vector else b
    x = _back_sub_transposed(lower, rhs) if transpose else _forward_sub(lower, rhs)
    return Tensor(x[..., 0] if vector else x)


def solve_spd(k, b):
    """Differentiable x = K⁻¹ b for symmetric positive-definite K (two triangular solves)."""
    k, b = as_tensor(k), as_tensor(b)
    _check_spd_input(k.data)
    if b.shape[-1] != k.shape[-1]:
        raise ShapeError(f"solve_spd: matrix {k.shape} and right-hand side {b.shape} do not conform")
    lower = _cholesky(k.data)
    x = _chol_solve(lower, b.data)

    def grad_b(g):
        return _unbroadcast(_chol_solve(lower, g), b.shape)

    def grad_k(g):
        gb = _chol_solve(lower, g)
        outer = -gb[..., :, None] * x[..., None, :]
        return _unbroadcast(0.5 * (outer + np.swapaxes(outer, -1, -2)), k.shape)

    return _node(x, ((b, grad_b), (k, grad_k)), "solve_spd")


def logdet_spd(k):
    """Differentiable log|K| via the Cholesky diagonal."""
    k = as_tensor(k)
    _check_spd_input(k.data)
    lower = _cholesky(k.data)
    out = 2.0 * np.sum(np.log(np.diagonal(lower, axis1=-2, axis2=-1)), axis=-1)

    def rule(g):
        eye = np.broadcast_to(np.eye(k.shape[-1]), k.shape)
        inv = _chol_solve(lower, eye.copy())
        inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
        return np.asarray(g)[..., None, None] * inv

    return _node(out, ((k, rule),), "logdet_spd")


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
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
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root, wrt=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a dict keyed by leaf identity, or a list aligned with ``wrt`` when
    given (zeros for leaves the root does not depend on).
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {id(root): np.ones(root.shape)}
    leaves = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                leaves[id(node)] = (node, g)
            continue
        for parent, rule in node._parents:
            contrib = rule(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    for node, g in leaves.values():
        node.grad = g
    if wrt is None:
        return {node: g for node, g in leaves.values()}
    out = []
    for leaf in wrt:
        hit = leaves.get(id(leaf))
        if hit is None:
            leaf.grad = np.zeros(leaf.shape)
        out.append(leaf.grad)
    return out


def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (test oracle)."""
    if not 1e-7 <= h <= 1e-4:
        raise ContractError(f"step h={h} outside [1e-7, 1e-4]")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x.copy()))
        flat[i] = orig - h
        down = float(f(x.copy()))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        gflat[i] = (up - down) / (2.0 * h)
    return grad
