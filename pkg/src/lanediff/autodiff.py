"""Reverse-mode automatic differentiation over dense numpy tensors.

A Tensor wraps one ndarray and remembers how it was produced; backward()
walks the recorded graph in reverse topological order and accumulates
gradients additively into every reachable leaf with requires_grad set.
Float32 is the working precision for training; gradient checks build the
same graphs at float64.
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float32

# Every op output is checked for NaN/Inf unless disabled (hot loops may
# turn this off around a block they have already validated).
_FINITE_CHECKS = True
_GRAD_ENABLED = True


class AutodiffError(RuntimeError):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NonFiniteValue(AutodiffError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(data, opname):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite value produced by '{opname}'")


class Tensor:
    """A dense array node in the computation graph.

    grad is allocated lazily and accumulates additively across backward
    calls until zero_grad() resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            data = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
            data = arr
        _check_finite(data, "tensor")
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    # ---- bookkeeping -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if g.shape != self.data.shape:
            raise ShapeMismatch(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # ---- operator sugar ----------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other))

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, output_gradient=None):
        backward(self, output_gradient)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _pair(a, b):
    """Coerce a binary op's operands; a plain scalar/array adopts the Tensor's dtype."""
    if isinstance(a, Tensor):
        if not isinstance(b, Tensor):
            b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    else:
        a, b = Tensor(a), Tensor(b)
    return a, b


def _node(data, parents, backward_fn, opname):
    """Wrap an op result; drops the tape when no parent needs gradients."""
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum grad over axes that were broadcast to reach grad.shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(output: Tensor, output_gradient=None):
    """Accumulate d(output)/d(leaf) into every reachable leaf's .grad."""
    if not output.requires_grad:
        raise AutodiffError("backward on a tensor with no recorded graph")
    if output_gradient is None:
        if output.size != 1:
            raise AutodiffError("output_gradient required for non-scalar outputs")
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(output_gradient, dtype=output.data.dtype)
        if seed.shape != output.data.shape:
            raise ShapeMismatch(
                f"output gradient shape {seed.shape} != output shape {output.data.shape}"
            )

    # Iterative topological order (graphs can be thousands of nodes deep).
    topo = []
    visited = set()
    stack = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads = {id(output): seed}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.accumulate_grad(g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(pg, p.data.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    # Leaves unreachable from output keep grad as-is.


# ---- elementwise arithmetic ------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    data = a.data + b.data
    return _node(data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = _pair(a, b)
    data = a.data * b.data
    return _node(data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    data = a.data**p
    return _node(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,), "exp")


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)
    return _node(data, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _node(data, (a,), lambda g: (g * 0.5 / data,), "sqrt")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)
    return _node(data, (a,), lambda g: (g * mask,), "relu")


def _sigmoid_stable(x):
    t = np.exp(-np.abs(x))  # never overflows
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a):
    a = as_tensor(a)
    data = _sigmoid_stable(a.data)
    return _node(data, (a,), lambda g: (g * data * (1.0 - data),), "sigmoid")


def silu(a):
    a = as_tensor(a)
    s = _sigmoid_stable(a.data)
    data = a.data * s
    return _node(data, (a,), lambda g: (g * (s + data * (1.0 - s)),), "silu")


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _node(data, (a,), lambda g: (g * (1.0 - data * data),), "tanh")


def softplus(a):
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data).astype(a.data.dtype)
    s = _sigmoid_stable(a.data)
    return _node(data, (a,), lambda g: (g * s,), "softplus")


def clip(a, lo, hi):
    """Clamp values; gradient passes only through the interior."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    interior = (a.data > lo) & (a.data < hi)
    return _node(data, (a,), lambda g: (g * interior,), "clip")


def minimum(a, b):
    a, b = _pair(a, b)
    take_a = a.data <= b.data  # ties route to the first argument
    data = np.where(take_a, a.data, b.data)
    return _node(data, (a, b), lambda g: (g * take_a, g * ~take_a), "minimum")


def maximum(a, b):
    a, b = _pair(a, b)
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)
    return _node(data, (a, b), lambda g: (g * take_a, g * ~take_a), "maximum")


def where(cond, a, b):
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)
    return _node(data, (a, b), lambda g: (g * cond, g * ~cond), "where")


# ---- reductions -------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(data, (a,), bwd, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return _node(data, (a,), bwd, "mean")


# ---- shape manipulation ------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _node(data, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)
    return _node(data, (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(tensors), bwd, "concat")


def getitem(a, idx):
    a = as_tensor(a)
    data = a.data[idx]

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(data, (a,), bwd, "getitem")


def pad1d(a, left, right):
    """Zero-pad the last axis."""
    a = as_tensor(a)
    width = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    data = np.pad(a.data, width)
    sl = (Ellipsis, slice(left, data.shape[-1] - right))

    def bwd(g):
        return (g[sl],)

    return _node(data, (a,), bwd, "pad1d")


def dilate1d(a, factor):
    """Insert factor-1 zeros between entries of the last axis (length L -> (L-1)*factor+1)."""
    a = as_tensor(a)
    L = a.data.shape[-1]
    out_len = (L - 1) * factor + 1
    data = np.zeros(a.data.shape[:-1] + (out_len,), dtype=a.data.dtype)
    data[..., ::factor] = a.data
    return _node(data, (a,), lambda g: (g[..., ::factor],), "dilate1d")


# ---- linear algebra -----------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1:
            ad = ad[None, :]
        if bd.ndim == 1:
            bd = bd[:, None]
        gg = g
        if a.data.ndim == 1 and b.data.ndim == 1:
            gg = np.asarray(g).reshape(1, 1)
        elif a.data.ndim == 1:
            gg = np.expand_dims(g, -2)
        elif b.data.ndim == 1:
            gg = np.expand_dims(g, -1)
        ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
        return (ga.reshape(a.data.shape) if ga.shape != a.data.shape and ga.size == a.data.size
                else _unbroadcast(ga, a.data.shape),
                gb.reshape(b.data.shape) if gb.shape != b.data.shape and gb.size == b.data.size
                else _unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), bwd, "matmul")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (a,), bwd, "softmax")


# ---- convolution ---------------------------------------------------------


def conv1d(x, w, b=None, stride=1, padding=0):
    """x: (N, C, L), w: (O, C, K), b: (O,) -> (N, O, Lo)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeMismatch("conv1d expects x (N,C,L) and w (O,C,K)")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv1d channel mismatch: x has {x.shape[1]}, w has {w.shape[1]}")
    N, C, L = x.shape
    O, _, K = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    Lp = xp.shape[-1]
    Lo = (Lp - K) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    data = np.einsum("nclk,ock->nol", win, w.data, optimize=True)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        data = data + b.data[None, :, None]
        parents.append(b)

    def bwd(g):
        gw = np.einsum("nclk,nol->ock", win, g, optimize=True)
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[:, :, k : k + Lo * stride : stride] += np.einsum(
                "nol,oc->ncl", g, w.data[:, :, k], optimize=True
            )
        gx = gxp[:, :, padding : Lp - padding] if padding else gxp
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 2)))
        return tuple(out)

    return _node(data, tuple(parents), bwd, "conv1d")


def conv2d(x, w, b=None, stride=1, padding=0):
    """x: (N, C, H, W), w: (O, C, Kh, Kw), b: (O,) -> (N, O, Ho, Wo)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch("conv2d expects x (N,C,H,W) and w (O,C,Kh,Kw)")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d channel mismatch: x has {x.shape[1]}, w has {w.shape[1]}")
    N, C, H, W = x.shape
    O, _, Kh, Kw = w.shape
    s = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - Kh) // s + 1
    Wo = (Wp - Kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (Kh, Kw), axis=(2, 3))[:, :, ::s, ::s]
    data = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        data = data + b.data[None, :, None, None]
        parents.append(b)

    def bwd(g):
        gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(Kh):
            for j in range(Kw):
                gxp[:, :, i : i + Ho * s : s, j : j + Wo * s : s] += np.einsum(
                    "nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True
                )
        gx = gxp[:, :, padding : Hp - padding, padding : Wp - padding] if padding else gxp
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 2, 3)))
        return tuple(out)

    return _node(data, tuple(parents), bwd, "conv2d")


# ---- densities ------------------------------------------------------------


def gaussian_log_prob(x, mean_t, var, batch_axes=0):
    """Summed N(mean, var*I) log-density, one value per leading batch axis.

    x: sample (constant), mean_t: graph tensor, var: scalar or
    broadcastable array (constant). With batch_axes=0 the sum runs over
    everything and a scalar Tensor is returned; with batch_axes=1 the
    first axis is kept.
    """
    mean_t = as_tensor(mean_t)
    dt = mean_t.data.dtype
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=dt)
    var_arr = np.asarray(var, dtype=dt)
    diff = Tensor(xd.astype(dt, copy=False)) - mean_t
    quad = diff * diff * Tensor(np.asarray(1.0 / var_arr, dtype=dt))
    const = np.broadcast_to(np.log(2.0 * np.pi * var_arr), xd.shape).astype(dt)
    per_elem = (quad + Tensor(const.copy())) * (-0.5)
    if batch_axes == 0:
        return sum_(per_elem)
    axes = tuple(range(batch_axes, per_elem.ndim))
    return sum_(per_elem, axis=axes)
