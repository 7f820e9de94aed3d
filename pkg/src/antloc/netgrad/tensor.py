"""A small reverse-mode autodiff engine over numpy arrays.

Spatial tensors are channels-last: ``(batch, x, y, z, channel)``.  Every op
returns a new :class:`Tensor` holding its parents and a closure that maps the
output gradient to one gradient per parent.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = {"grad": True, "check_finite": False, "relu_masks": None}


@contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextmanager
def record_relu_masks():
    """Collect the activation pattern of every relu evaluated in the block."""
    prev = _state["relu_masks"]
    masks: list = []
    _state["relu_masks"] = masks
    try:
        yield masks
    finally:
        _state["relu_masks"] = prev


def set_finite_check(enabled: bool) -> None:
    """When enabled, every op raises FloatingPointError on non-finite output."""
    _state["check_finite"] = bool(enabled)


class Tensor:
    __slots__ = ("value", "grad", "op", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.op = "leaf"
        self.parents = ()
        self._backward = None
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape}, dtype={self.value.dtype})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable node."""
        if self.value.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.value.shape}")
        order = _topological(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.value.dtype, copy=True)
                else:
                    parent.grad += g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _topological(root: Tensor) -> list:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(value, parents, backward, op: str) -> Tensor:
    """Wrap ``value`` as the output of ``op``; ``backward(g)`` returns parent grads."""
    out = Tensor(value)
    out.op = op
    if _state["check_finite"] and not np.isfinite(out.value).all():
        raise FloatingPointError(f"non-finite output from {op}")
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out._backward = backward
        out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_op(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,), "square")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    if _state["relu_masks"] is not None:
        _state["relu_masks"].append(np.packbits(mask).tobytes())
    return make_op(np.where(mask, a.value, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return make_op(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape),), "sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.value.size
    return make_op(a.value.mean(), (a,), lambda g: (np.broadcast_to(g / n, a.shape),), "mean")


def sum_axes(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape),)

    return make_op(a.value.sum(axis=axes), (a,), backward, "sum_axes")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return x.reshape(-1, x.shape[-1])
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    windows = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))  # B,X,Y,Z,C,k,k,k
    return windows.reshape(-1, x.shape[-1] * k ** 3)


def _use_shifted(c_in: int, k: int) -> bool:
    # one matmul per kernel offset beats im2col once there are a few input channels
    return k > 1 and c_in >= 4


def _pad_same(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))


def _conv_value(x: np.ndarray, w: np.ndarray):
    """Forward value and the cached im2col matrix (None when the shifted path is used)."""
    # w is (C_in, k, k, k, C_out); im2col columns are ordered (C_in, kx, ky, kz)
    k, c_out = w.shape[1], w.shape[-1]
    if _use_shifted(w.shape[0], k):
        B, X, Y, Z, _ = x.shape
        xp = _pad_same(x, k)
        y = np.zeros((B, X, Y, Z, c_out), dtype=np.result_type(x, w))
        for a, b, c in np.ndindex(k, k, k):
            y += xp[:, a:a + X, b:b + Y, c:c + Z, :] @ w[:, a, b, c, :]
        return y, None
    cols = _im2col(x, k)
    y = cols @ w.reshape(-1, c_out)
    return y.reshape(x.shape[:4] + (c_out,)), cols


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, w_shape) -> np.ndarray:
    c_in, k, c_out = w_shape[0], w_shape[1], w_shape[-1]
    B, X, Y, Z, _ = x.shape
    xp = _pad_same(x, k)
    g2 = g.reshape(-1, c_out)
    gw = np.empty(w_shape, dtype=np.result_type(x, g))
    for a, b, c in np.ndindex(k, k, k):
        gw[:, a, b, c, :] = xp[:, a:a + X, b:b + Y, c:c + Z, :].reshape(-1, c_in).T @ g2
    return gw


def conv3d(x, w, b=None) -> Tensor:
    """'Same' 3D convolution with zero padding (cross-correlation, odd kernel)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.value.ndim != 5 or w.value.ndim != 5:
        raise ValueError("conv3d expects x (B,X,Y,Z,C) and w (C_in,k,k,k,C_out)")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {w.shape[0]}")
    k = w.shape[1]
    if k % 2 == 0 or w.shape[1:4] != (k, k, k):
        raise ValueError("conv3d kernels must be cubic with odd size")
    y, cols = _conv_value(x.value, w.value)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        y = y + b.value
        parents = (x, w, b)
    need_w = _state["grad"] and w.requires_grad
    keep = cols if need_w else None
    x_in = x.value if (need_w and cols is None) else None

    def backward(g):
        c_out = w.shape[-1]
        g2 = g.reshape(-1, c_out)
        gw = None
        if keep is not None:
            gw = (keep.T @ g2).reshape(w.shape)
        elif x_in is not None:
            gw = _conv_kernel_grad(x_in, g, w.shape)
        gx = None
        if x.requires_grad:
            wt = np.ascontiguousarray(w.value[:, ::-1, ::-1, ::-1, :].transpose(4, 1, 2, 3, 0))
            gx, _ = _conv_value(g, wt)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_op(y, parents, backward, "conv3d")


def avgpool2(x) -> Tensor:
    """2x2x2 average pooling; odd spatial sizes are zero-padded at the high end."""
    x = as_tensor(x)
    B, X, Y, Z, C = x.shape
    pad = (X % 2, Y % 2, Z % 2)
    xv = np.pad(x.value, ((0, 0), (0, pad[0]), (0, pad[1]), (0, pad[2]), (0, 0))) if any(pad) else x.value
    X2, Y2, Z2 = xv.shape[1] // 2, xv.shape[2] // 2, xv.shape[3] // 2
    y = xv.reshape(B, X2, 2, Y2, 2, Z2, 2, C).mean(axis=(2, 4, 6))

    def backward(g):
        gx = np.broadcast_to((g / 8.0)[:, :, None, :, None, :, None, :], (B, X2, 2, Y2, 2, Z2, 2, C))
        gx = gx.reshape(B, 2 * X2, 2 * Y2, 2 * Z2, C)
        return (gx[:, :X, :Y, :Z],)

    return make_op(y, (x,), backward, "avgpool2")


def upsample_nearest2(x, size=None) -> Tensor:
    """Nearest-neighbour x2 upsampling, then crop to ``size`` (spatial) if given."""
    x = as_tensor(x)
    B, X, Y, Z, C = x.shape
    size = tuple(size) if size is not None else (2 * X, 2 * Y, 2 * Z)
    if any(s > 2 * n or s < 2 * n - 1 for s, n in zip(size, (X, Y, Z))):
        raise ValueError(f"cannot upsample {(X, Y, Z)} to {size}")
    y = np.broadcast_to(x.value[:, :, None, :, None, :, None, :], (B, X, 2, Y, 2, Z, 2, C))
    y = y.reshape(B, 2 * X, 2 * Y, 2 * Z, C)[:, : size[0], : size[1], : size[2]]

    def backward(g):
        gp = np.zeros((B, 2 * X, 2 * Y, 2 * Z, C), dtype=g.dtype)
        gp[:, : size[0], : size[1], : size[2]] = g
        return (gp.reshape(B, X, 2, Y, 2, Z, 2, C).sum(axis=(2, 4, 6)),)

    return make_op(np.ascontiguousarray(y), (x,), backward, "upsample_nearest2")


def softmax_voxels(x) -> Tensor:
    """Softmax over all spatial voxels, separately per batch item and channel."""
    x = as_tensor(x)
    axes = (1, 2, 3)
    shifted = x.value - x.value.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axes, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axes, keepdims=True)),)

    return make_op(p, (x,), backward, "softmax_voxels")


def frobenius_inner(h, grids) -> Tensor:
    """``<h_b, G_a>_F`` for every batch item b and grid a.

    ``h`` is (B, X, Y, Z, 1); ``grids`` is a constant (X, Y, Z, A) array.
    Returns (B, A).
    """
    h = as_tensor(h)
    gv = np.asarray(grids, dtype=h.dtype)
    if h.shape[1:4] != gv.shape[:3] or h.shape[-1] != 1:
        raise ValueError(f"heatmap {h.shape} does not match grids {gv.shape}")
    B = h.shape[0]
    flat_g = gv.reshape(-1, gv.shape[-1])
    out = h.value.reshape(B, -1) @ flat_g

    def backward(g):
        return ((g @ flat_g.T).reshape(h.shape),)

    return make_op(out, (h,), backward, "frobenius_inner")
