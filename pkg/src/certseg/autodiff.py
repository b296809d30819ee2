"""Minimal reverse-mode autodiff over dense numpy arrays.

All training-time arithmetic is float64. The primitive set is exactly what
the losses and the toy network need; there is no general broadcasting.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    def __init__(self, op, shape_a, shape_b):
        super().__init__(f"{op}: shape mismatch {tuple(shape_a)} vs {tuple(shape_b)}")


class Tensor:
    """Dense N-d array node in a reverse-mode graph.

    ``grad`` is populated by :func:`backward` and accumulates across calls
    until :meth:`zero_grad` is invoked.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar for the elementwise primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return negate(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(op, a.data.shape, b.data.shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor(a.data + b.data, parents=(a, b), backward=bwd, op="add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return Tensor(a.data - b.data, parents=(a, b), backward=bwd, op="sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor(a.data * b.data, parents=(a, b), backward=bwd, op="mul")


def negate(a):
    a = as_tensor(a)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(-g)

    return Tensor(-a.data, parents=(a,), backward=bwd, op="negate")


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(g * c)

    return Tensor(a.data * c, parents=(a,), backward=bwd, op="scale")


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(g * out.data)

    return Tensor(out_data, parents=(a,), backward=bwd, op="exp")


def log(a, floor=0.0):
    """Natural log with an optional clamp: log(max(x, floor)).

    The gradient is masked to zero wherever the clamp is active.
    """
    a = as_tensor(a)
    clamped = np.maximum(a.data, floor) if floor > 0.0 else a.data

    def bwd(g, out):
        if a.requires_grad:
            if floor > 0.0:
                mask = (a.data > floor).astype(np.float64)
                a._accumulate(g * mask / clamped)
            else:
                a._accumulate(g / a.data)

    return Tensor(np.log(clamped), parents=(a,), backward=bwd, op="log")


def relu(a):
    a = as_tensor(a)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return Tensor(np.maximum(a.data, 0.0), parents=(a,), backward=bwd, op="relu")


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return Tensor(a.data.reshape(shape), parents=(a,), backward=bwd, op="reshape")


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return Tensor(np.transpose(a.data, axes), parents=(a,), backward=bwd, op="transpose")


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, out):
        pieces = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(p)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor(data, parents=tuple(tensors), backward=bwd, op="concat")


def crop2d(a, top, left, height, width):
    """Crop the trailing two (spatial) axes."""
    a = as_tensor(a)
    if top < 0 or left < 0 or top + height > a.shape[-2] or left + width > a.shape[-1]:
        raise ValueError(
            f"crop2d: rect ({top},{left},{height},{width}) outside extent {a.shape[-2:]}"
        )

    def bwd(g, out):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[..., top : top + height, left : left + width] = g
            a._accumulate(full)

    data = a.data[..., top : top + height, left : left + width].copy()
    return Tensor(data, parents=(a,), backward=bwd, op="crop2d")


# ---------------------------------------------------------------------------
# linear algebra / reductions


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError("matmul", a.data.shape, b.data.shape)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(a.data @ b.data, parents=(a, b), backward=bwd, op="matmul")


def tsum(a):
    a = as_tensor(a)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g)))

    return Tensor(np.sum(a.data), parents=(a,), backward=bwd, op="sum")


def tmean(a):
    a = as_tensor(a)
    n = a.data.size

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g) / n))

    return Tensor(np.mean(a.data), parents=(a,), backward=bwd, op="mean")


def tsum_axis(a, axis):
    """Sum along one axis, removing it."""
    a = as_tensor(a)

    def bwd(g, out):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return Tensor(np.sum(a.data, axis=axis), parents=(a,), backward=bwd, op="sum_axis")


def tmax(a, axis):
    """Max along one axis; gradient routes to the first argmax."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)

    def bwd(g, out):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            grid = np.indices(idx.shape)
            index = list(grid)
            index.insert(axis if axis >= 0 else a.data.ndim + axis, idx)
            full[tuple(index)] = g
            a._accumulate(full)

    return Tensor(np.max(a.data, axis=axis), parents=(a,), backward=bwd, op="max")


def masked_mean(a, mask):
    """Mean of ``a`` over positions where constant ``mask`` is nonzero.

    Returns 0 when the mask is empty.
    """
    a = as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.data.shape:
        raise ShapeMismatchError("masked_mean", a.data.shape, m.shape)
    total = m.sum()

    def bwd(g, out):
        if a.requires_grad and total > 0:
            a._accumulate(float(g) * m / total)

    value = float((a.data * m).sum() / total) if total > 0 else 0.0
    return Tensor(value, parents=(a,), backward=bwd, op="masked_mean")


def pairwise_sqdist(a):
    """All pairwise squared Euclidean distances between rows of (n, F)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"pairwise_sqdist: expected 2-d rows, got shape {a.data.shape}")
    x = a.data
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)

    def bwd(g, out):
        if a.requires_grad:
            s = g + g.T
            a._accumulate(2.0 * (x * s.sum(axis=1)[:, None] - s @ x))

    return Tensor(d, parents=(a,), backward=bwd, op="pairwise_sqdist")


# ---------------------------------------------------------------------------
# normalisation / activation over axes

L2_EPSILON = 1e-12


def softmax_t(a, tau, axis):
    """Channel-wise softmax with temperature tau along ``axis``."""
    a = as_tensor(a)
    if tau <= 0:
        raise ValueError(f"softmax_t: temperature must be positive, got {tau}")
    z = a.data / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g, out):
        if a.requires_grad:
            inner = np.sum(g * p, axis=axis, keepdims=True)
            a._accumulate(p * (g - inner) / tau)

    return Tensor(p, parents=(a,), backward=bwd, op="softmax_t")


def l2_normalize(a, axis, eps=L2_EPSILON):
    """L2 normalisation along ``axis``; a (near-)zero vector passes through scaled by 1/eps."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    denom = np.maximum(n, eps)
    y = a.data / denom

    def bwd(g, out):
        if a.requires_grad:
            live = (n > eps).astype(np.float64)
            inner = np.sum(g * y, axis=axis, keepdims=True)
            a._accumulate((g - live * y * inner) / denom)

    return Tensor(y, parents=(a,), backward=bwd, op="l2_normalize")


# ---------------------------------------------------------------------------
# spatial primitives


def _im2col(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(cols).reshape(n, c * kh * kw, oh * ow)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution (cross-correlation) with zero padding.

    x: (N, Cin, H, W); w: (Cout, Cin, kh, kw); b: optional (Cout,).
    """
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    n, cin, h, wid = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeMismatchError("conv2d", x.data.shape, w.data.shape)
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(cout, -1)
    out_data = np.matmul(wmat, cols).reshape(n, cout, oh, ow)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    def bwd(g, out):
        gmat = g.reshape(n, cout, oh * ow)
        if w.requires_grad:
            gflat = gmat.transpose(1, 0, 2).reshape(cout, -1)
            cflat = cols.transpose(1, 0, 2).reshape(cols.shape[1], -1)
            dw = np.matmul(gflat, cflat.T).reshape(w.data.shape)
            w._accumulate(dw)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)
            dcols = dcols.reshape(n, cin, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += dcols[
                        :, :, i, j
                    ]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out_data, parents=parents, backward=bwd, op="conv2d")


def avg_pool(x, k):
    """Non-overlapping average pooling with window and stride ``k``."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool: extent {(h, w)} not divisible by {k}")
    oh, ow = h // k, w // k
    out_data = x.data.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))

    def bwd(g, out):
        if x.requires_grad:
            dx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            x._accumulate(dx)

    return Tensor(out_data, parents=(x,), backward=bwd, op="avg_pool")


def _resize_axis_weights(n_in, n_out):
    # align-corners: output corner samples map exactly onto input corners
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, w1


def bilinear_resize(x, out_hw):
    """Align-corners bilinear resize of the trailing two axes."""
    x = as_tensor(x)
    h, w = x.data.shape[-2:]
    oh, ow = out_hw
    r0, r1, wr = _resize_axis_weights(h, oh)
    c0, c1, wc = _resize_axis_weights(w, ow)
    wr = wr.reshape(-1, 1)
    wc = wc.reshape(1, -1)
    d = x.data
    top = d[..., r0, :][..., c0] * (1 - wc) + d[..., r0, :][..., c1] * wc
    bot = d[..., r1, :][..., c0] * (1 - wc) + d[..., r1, :][..., c1] * wc
    out_data = top * (1 - wr) + bot * wr

    def bwd(g, out):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for (ri, rw) in ((r0, 1 - wr), (r1, wr)):
                for (ci, cw) in ((c0, 1 - wc), (c1, wc)):
                    contrib = g * rw * cw
                    np.add.at(
                        dx,
                        (..., ri[:, None], ci[None, :]),
                        contrib,
                    )
            x._accumulate(dx)

    return Tensor(out_data, parents=(x,), backward=bwd, op="bilinear_resize")


def dropout(x, p, seed, counter):
    """Dropout with keep-scaling; the mask comes from a counter-based seeded stream."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: probability must be in [0, 1), got {p}")
    rng = np.random.default_rng([seed, counter])
    keep = (rng.random(x.data.shape) >= p).astype(np.float64) / (1.0 - p)

    def bwd(g, out):
        if x.requires_grad:
            x._accumulate(g * keep)

    return Tensor(x.data * keep, parents=(x,), backward=bwd, op="dropout")


# ---------------------------------------------------------------------------
# backward and the finite-difference check


def backward(root):
    """Populate gradients on every reachable node via the chain rule.

    Repeated calls without resetting gradients accumulate.
    """
    root = as_tensor(root)
    if root.data.ndim != 0 and root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    order = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    # incoming gradients collect in .grad; interior buffers are cleared after
    # use so a later backward on an overlapping graph starts clean, while
    # leaf gradients persist and accumulate across calls
    root._accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        g = node.grad
        node.grad = None
        node._backward(g, node)


def gradient_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be re-entrant: it is
    called repeatedly on perturbed copies of ``x``.
    """
    if h <= 0:
        raise ValueError("gradient_check: step must be positive")
    x0 = np.array(x.data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x0)

    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        for sgn in (+1.0, -1.0):
            pert = flat.copy()
            pert[i] += sgn * h
            val = f(Tensor(pert.reshape(x0.shape))).data
            if not np.isfinite(val):
                raise ValueError("gradient_check: function non-finite at perturbed point")
            if sgn > 0:
                fp = float(val)
            else:
                fm = float(val)
        cd = (fp - fm) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - cd) / max(1.0, abs(cd))
        worst = max(worst, err)
    return worst
