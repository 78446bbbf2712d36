"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Var` wraps a numpy array (the tensor value) and records the
operation that produced it.  Calling :meth:`Var.backward` on a scalar
result fills ``.grad`` on every node of the graph.  Only the operations
the keypoint pipeline needs are provided; broadcasting follows numpy and
gradients are summed back onto the input shapes.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


def as_array(x):
    return np.asarray(x, dtype=DTYPE)


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=True):
        self.value = as_array(value)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"

    def backward(self):
        if self.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root):
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def const(x):
    """Wrap ``x`` as a constant node (no gradient is accumulated on it)."""
    if isinstance(x, Var):
        return x
    return Var(x, requires_grad=False, op="const")


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = const(a), const(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Var(a.value + b.value, (a, b), bw, "add")


def sub(a, b):
    a, b = const(a), const(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Var(a.value - b.value, (a, b), bw, "sub")


def mul(a, b):
    a, b = const(a), const(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Var(a.value * b.value, (a, b), bw, "mul")


def div(a, b):
    a, b = const(a), const(b)
    _broadcast_shape("div", a, b)
    out = a.value / b.value

    def bw(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))

    return Var(out, (a, b), bw, "div")


def relu(x):
    x = const(x)
    mask = x.value > 0
    return Var(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x):
    x = const(x)
    out = np.tanh(x.value)
    return Var(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x):
    x = const(x)
    out = np.exp(x.value)
    return Var(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = const(x)
    return Var(np.log(x.value), (x,), lambda g: (g / x.value,), "log")


def sqrt(x):
    x = const(x)
    out = np.sqrt(x.value)
    return Var(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def clip(x, lo, hi):
    """Clamp into [lo, hi]; the gradient is zero where clamping is active."""
    x = const(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return Var(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,), "clip")


# reductions and shape ops ---------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = const(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Var(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = const(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape):
    x = const(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return Var(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    """Swap the last two axes, or permute by ``axes``."""
    x = const(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    inv = np.argsort(axes)
    return Var(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs, axis=-1):
    xs = [const(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(out, tuple(xs), bw, "concat")


def index_select(x, index):
    """Basic/advanced numpy indexing with scatter-add backward."""
    x = const(x)
    out = x.value[index]

    def bw(g):
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        return (full,)

    return Var(out, (x,), bw, "index")


def gather_cell(field, cells):
    """Pick one grid cell per row.

    ``field`` has shape (B, S*S, c) and ``cells`` holds B flat cell
    indices; the result has shape (B, c).
    """
    field = const(field)
    cells = np.asarray(cells, dtype=np.int64)
    if field.ndim != 3 or cells.shape != (field.shape[0],):
        raise ShapeError("gather_cell", field.shape, cells.shape)
    if np.any(cells < 0) or np.any(cells >= field.shape[1]):
        raise IndexError(f"gather_cell: cell index outside [0, {field.shape[1]})")
    rows = np.arange(field.shape[0])
    return index_select(field, (rows, cells))


def matmul(a, b):
    a, b = const(a), const(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = np.matmul(a.value, b.value)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Var(out, (a, b), bw, "matmul")


def block_average_pool(x, out_side):
    """Average-pool a (..., l, l, C) map to (..., out_side, out_side, C)."""
    x = const(x)
    l = x.shape[-2]
    if x.ndim < 3 or x.shape[-3] != l or l % out_side:
        raise ShapeError("block_average_pool", x.shape, (out_side, out_side))
    k = l // out_side
    lead, c = x.shape[:-3], x.shape[-1]
    blocks = x.value.reshape(*lead, out_side, k, out_side, k, c)
    out = blocks.mean(axis=(-4, -2))

    def bw(g):
        g = g[..., :, None, :, None, :] / (k * k)
        g = np.broadcast_to(g, blocks.shape)
        return (g.reshape(x.shape),)

    return Var(out, (x,), bw, "block_average_pool")


# softmax family ---------------------------------------------------------------

def softmax(x, axis=-1):
    x = const(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Var(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    x = const(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Var(out, (x,), bw, "log_softmax")


# linear algebra ----------------------------------------------------------------

def logdet(m):
    """log det of a (batch of) symmetric positive-definite matrices.

    Uses a Cholesky factorisation; the gradient is the symmetrised inverse.
    """
    m = const(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ShapeError("logdet", m.shape)
    try:
        chol = np.linalg.cholesky(m.value)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("logdet: matrix is not positive definite") from None
    out = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)

    def bw(g):
        eye = np.broadcast_to(np.eye(m.shape[-1]), m.shape)
        inv = np.linalg.solve(m.value, eye)
        inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
        return (np.asarray(g)[..., None, None] * inv,)

    return Var(out, (m,), bw, "logdet")


def quad_form(r, m):
    """rᵀ M r over the last axis, batched."""
    r = const(r)
    mr = matmul(m, reshape(r, r.shape + (1,)))
    return sum(r * reshape(mr, r.shape), axis=-1)


def bilinear_sample(maps, points):
    """Bilinear lookup of (B, H, W) maps at B continuous (x, y) points.

    Points are in map index units (pixel (i, j) sits at x=j, y=i) and are
    clamped to the map extent.
    """
    maps = const(maps)
    pts = np.asarray(points, dtype=DTYPE)
    b, h, w = maps.shape
    if pts.shape != (b, 2):
        raise ShapeError("bilinear_sample", maps.shape, pts.shape)
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    rows = np.arange(b)
    corners = [(y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
               (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)]
    out = np.zeros(b)
    for yy, xx, wt in corners:
        out += wt * maps.value[rows, yy, xx]

    def bw(g):
        full = np.zeros_like(maps.value)
        for yy, xx, wt in corners:
            np.add.at(full, (rows, yy, xx), g * wt)
        return (full,)

    return Var(out, (maps,), bw, "bilinear_sample")


# gradient checking -------------------------------------------------------------

def numeric_grad(f, x, step=1e-5, coords=None):
    """Central finite differences of scalar ``f`` at array ``x``.

    ``coords`` restricts the probe to those flat indices (others stay 0).
    """
    x = as_array(x).copy()
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x))
        flat[i] = orig - step
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def relative_error(a, b, floor=1e-8):
    a, b = as_array(a), as_array(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(f, x, step=1e-5, tol=1e-4, sample=None, seed=0):
    """Compare the backward gradient of ``f`` with central differences.

    ``f`` maps a :class:`Var` to a scalar :class:`Var`.  With ``sample``
    only that many randomly chosen coordinates are probed.  Returns a dict
    with ``max_rel_err``, ``passed`` and both gradients.
    """
    x = as_array(x)
    leaf = Var(x.copy())
    out = f(leaf)
    if not np.all(np.isfinite(out.value)):
        raise ValueError("grad_check: f(x) is not finite")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    coords = None
    if sample is not None and sample < x.size:
        coords = np.sort(np.random.default_rng(seed).choice(x.size, size=sample, replace=False))
    numeric = numeric_grad(lambda z: f(Var(z)).value, x, step, coords)
    if coords is not None:
        analytic = analytic.reshape(-1)[coords]
        numeric = numeric.reshape(-1)[coords]
    # absolute floor scaled to the gradient size keeps exact zeros from
    # reporting spurious relative error
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1.0)
    err = relative_error(analytic, numeric, floor=scale * 1e-3)
    return {"max_rel_err": err, "passed": err < tol,
            "analytic": analytic, "numeric": numeric}
