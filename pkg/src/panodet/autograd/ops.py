"""Differentiable ops over Tensors.

Every op computes its forward value with numpy (convolutions go through the
kernels backend) and registers a backward closure on the output. Backward
closures never mutate their incoming gradient and always produce fresh
arrays, so one gradient array may safely feed several parents.
"""

import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _keep_shape(x_shape, axis):
    """Shape with reduced axes kept as 1, for re-broadcasting grads."""
    if axis is None:
        return (1,) * len(x_shape)
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(a % len(x_shape) for a in axis)
    return tuple(1 if i in axis else n for i, n in enumerate(x_shape))


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        out = Tensor._make(a.data + b, (a,), None)

        def bwd(g, a=a):
            a._accum(g)

        out._backward = bwd if out.requires_grad else None
        return out
    b = as_tensor(b, dtype=a.dtype)
    out = Tensor._make(a.data + b.data, (a, b), None)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def mul(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        out = Tensor._make(a.data * b, (a,), None)

        def bwd(g, a=a, b=b):
            a._accum(g * b)

        out._backward = bwd if out.requires_grad else None
        return out
    b = as_tensor(b, dtype=a.dtype)
    out = Tensor._make(a.data * b.data, (a, b), None)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def neg(a):
    return mul(a, -1.0)


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -b)
    return add(a, neg(b))


def div(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    b = as_tensor(b, dtype=a.dtype)
    out = Tensor._make(a.data / b.data, (a, b), None)

    def bwd(g, a=a, b=b, y=out.data):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * y / b.data, b.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def absolute(a):
    a = as_tensor(a)
    out = Tensor._make(np.abs(a.data), (a,), None)

    def bwd(g, a=a):
        a._accum(g * np.sign(a.data))

    out._backward = bwd if out.requires_grad else None
    return out


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor._make(y, (a,), None)

    def bwd(g, a=a, y=y):
        a._accum(g * y)

    out._backward = bwd if out.requires_grad else None
    return out


def log(a):
    a = as_tensor(a)
    out = Tensor._make(np.log(a.data), (a,), None)

    def bwd(g, a=a):
        a._accum(g / a.data)

    out._backward = bwd if out.requires_grad else None
    return out


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the input was within range."""
    a = as_tensor(a)
    out = Tensor._make(np.clip(a.data, lo, hi), (a,), None)

    def bwd(g, a=a, lo=lo, hi=hi):
        mask = (a.data >= lo) & (a.data <= hi)
        a._accum(g * mask)

    out._backward = bwd if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    out = Tensor._make(a.data @ b.data, (a, b), None)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    out._backward = bwd if out.requires_grad else None
    return out


def linear(x, w, b=None):
    """y = x @ w (+ b) along the last axis. x: [..., Cin], w: [Cin, Cout]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
    out_shape = lead + (w.shape[1],)
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor._make(y.reshape(out_shape), parents, None)

    def bwd(g, x=x, w=w, b=b, x2=x2):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x._accum((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accum(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=0))

    out._backward = bwd if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# convolutions (kernel backend)
# ---------------------------------------------------------------------------

def _check_odd(k):
    if k % 2 == 0:
        raise ValueError(f"kernel extent must be odd, got {k}")


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation. x: [Ci,H,W], w: [Co,Ci,kh,kw], b: [Co] or None."""
    x, w = as_tensor(x), as_tensor(w)
    sh, sw = (stride, stride) if isinstance(stride, int) else tuple(stride)
    ph, pw = (padding, padding) if isinstance(padding, int) else tuple(padding)
    co, ci, kh, kw = w.shape
    _check_odd(kh)
    _check_odd(kw)
    if x.ndim != 3 or x.shape[0] != ci:
        raise ValueError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    if x.shape[1] + 2 * ph < kh or x.shape[2] + 2 * pw < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    xd = np.ascontiguousarray(x.data)
    y = kernels.conv2d_forward(xd, w.data, (sh, sw), (ph, pw))
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor._make(y, parents, None)

    def bwd(g, x=x, w=w, b=b, xd=xd):
        g = np.ascontiguousarray(g, dtype=xd.dtype)
        gx, gw = kernels.conv2d_backward(xd, w.data, g, (sh, sw), (ph, pw))
        if x.requires_grad:
            x._accum(gx)
        if w.requires_grad:
            w._accum(gw)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(1, 2)))

    out._backward = bwd if out.requires_grad else None
    return out


def conv3d(x, w, b=None, stride=1, padding=0):
    """x: [Ci,D,H,W], w: [Co,Ci,kd,kh,kw]; per-axis strides allowed."""
    x, w = as_tensor(x), as_tensor(w)
    st = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
    pd = (padding,) * 3 if isinstance(padding, int) else tuple(padding)
    co, ci, kd, kh, kw = w.shape
    for k in (kd, kh, kw):
        _check_odd(k)
    if x.ndim != 4 or x.shape[0] != ci:
        raise ValueError(f"conv3d: input {x.shape} does not match weight {w.shape}")
    for ax in range(3):
        if x.shape[1 + ax] + 2 * pd[ax] < w.shape[2 + ax]:
            raise ValueError("conv3d: kernel larger than padded input")
    xd = np.ascontiguousarray(x.data)
    y = kernels.conv3d_forward(xd, w.data, st, pd)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[:, None, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor._make(y, parents, None)

    def bwd(g, x=x, w=w, b=b, xd=xd):
        g = np.ascontiguousarray(g, dtype=xd.dtype)
        gx, gw = kernels.conv3d_backward(xd, w.data, g, st, pd)
        if x.requires_grad:
            x._accum(gx)
        if w.requires_grad:
            w._accum(gw)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(1, 2, 3)))

    out._backward = bwd if out.requires_grad else None
    return out


def depthwise_conv2d(x, w, b=None):
    """Per-channel k×k conv, stride 1, same padding. x: [C,H,W], w: [C,k,k]."""
    x, w = as_tensor(x), as_tensor(w)
    _check_odd(w.shape[1])
    if x.shape[0] != w.shape[0]:
        raise ValueError(f"depthwise_conv2d: {x.shape[0]} channels vs {w.shape[0]} kernels")
    xd = np.ascontiguousarray(x.data)
    y = kernels.depthwise2d_forward(xd, w.data)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor._make(y, parents, None)

    def bwd(g, x=x, w=w, b=b, xd=xd):
        g = np.ascontiguousarray(g, dtype=xd.dtype)
        gx, gw = kernels.depthwise2d_backward(xd, w.data, g)
        if x.requires_grad:
            x._accum(gx)
        if w.requires_grad:
            w._accum(gw)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(1, 2)))

    out._backward = bwd if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training,
               axis=0, momentum=0.1, eps=1e-5):
    """Normalize over all axes except `axis`. running_* are plain numpy
    buffers, updated in place in training mode."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("batch_norm: scale/shift must match channel extent")
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = tuple(c if i == axis else 1 for i in range(x.ndim))
    n = int(np.prod([x.shape[i] for i in red])) if red else 1

    if training:
        m = x.data.mean(axis=red)
        v = x.data.var(axis=red)
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        vu = v * (n / (n - 1)) if n > 1 else v
        running_var *= 1.0 - momentum
        running_var += momentum * vu
    else:
        m = running_mean.astype(x.dtype, copy=False)
        v = running_var.astype(x.dtype, copy=False)

    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m.reshape(bshape)) * inv.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    out = Tensor._make(y, (x, gamma, beta), None)

    def bwd(g, x=x, gamma=gamma, beta=beta, xhat=xhat, inv=inv):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=red))
        if beta.requires_grad:
            beta._accum(g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                mean_d = dxhat.mean(axis=red).reshape(bshape)
                mean_dx = (dxhat * xhat).mean(axis=red).reshape(bshape)
                dx = inv.reshape(bshape) * (dxhat - mean_d - xhat * mean_dx)
            else:
                dx = dxhat * inv.reshape(bshape)
            x._accum(dx)

    out._backward = bwd if out.requires_grad else None
    return out


def relu(a):
    a = as_tensor(a)
    out = Tensor._make(np.maximum(a.data, 0), (a,), None)

    def bwd(g, a=a):
        a._accum(g * (a.data > 0))

    out._backward = bwd if out.requires_grad else None
    return out


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor._make(y, (a,), None)

    def bwd(g, a=a, y=y):
        a._accum(g * y * (1.0 - y))

    out._backward = bwd if out.requires_grad else None
    return out


def softmax(a, axis=0):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._make(y, (a,), None)

    def bwd(g, a=a, y=y, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accum((g - dot) * y)

    out._backward = bwd if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def _pool_patches(x, k, s):
    c, h, w = x.shape
    if k > h or k > w:
        raise ValueError(f"pool window {k} exceeds input {h}x{w}")
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    s0, s1, s2 = x.strides
    v = np.lib.stride_tricks.as_strided(
        x, shape=(c, ho, wo, k, k), strides=(s0, s1 * s, s2 * s, s1, s2),
        writeable=False)
    return v.reshape(c, ho, wo, k * k), ho, wo


def maxpool2d(x, k=2, stride=None):
    x = as_tensor(x)
    s = k if stride is None else stride
    xd = np.ascontiguousarray(x.data)
    patches, ho, wo = _pool_patches(xd, k, s)
    arg = patches.argmax(axis=-1)  # first max in scan order
    y = np.take_along_axis(patches, arg[..., None], axis=-1)[..., 0]
    out = Tensor._make(y, (x,), None)

    def bwd(g, x=x, arg=arg):
        c = x.shape[0]
        gx = np.zeros(x.shape, dtype=g.dtype)
        rows = (np.arange(ho) * s)[None, :, None] + arg // k
        cols = (np.arange(wo) * s)[None, None, :] + arg % k
        ch = np.arange(c)[:, None, None]
        np.add.at(gx, (np.broadcast_to(ch, arg.shape), rows, cols), g)
        x._accum(gx)

    out._backward = bwd if out.requires_grad else None
    return out


def avgpool2d(x, k=2, stride=None):
    x = as_tensor(x)
    s = k if stride is None else stride
    xd = np.ascontiguousarray(x.data)
    patches, ho, wo = _pool_patches(xd, k, s)
    y = patches.mean(axis=-1)
    out = Tensor._make(y, (x,), None)

    def bwd(g, x=x):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gk = g / (k * k)
        for di in range(k):
            for dj in range(k):
                gx[:, di:di + ho * s:s, dj:dj + wo * s:s] += gk
        x._accum(gx)

    out._backward = bwd if out.requires_grad else None
    return out


def upsample_nearest2d(x, factor=2):
    x = as_tensor(x)
    f = int(factor)
    y = np.repeat(np.repeat(x.data, f, axis=1), f, axis=2)
    out = Tensor._make(y, (x,), None)

    def bwd(g, x=x, f=f):
        c, h, w = x.shape
        x._accum(g.reshape(c, h, f, w, f).sum(axis=(2, 4)))

    out._backward = bwd if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor._make(np.asarray(y), (a,), None)

    def bwd(g, a=a, axis=axis, keepdims=keepdims):
        if not keepdims:
            g = np.reshape(g, _keep_shape(a.shape, axis))
        a._accum(np.broadcast_to(g, a.shape).copy())

    out._backward = bwd if out.requires_grad else None
    return out


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    y = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.shape[i] for i in ((axis,) if isinstance(axis, int) else axis)])
    out = Tensor._make(np.asarray(y), (a,), None)

    def bwd(g, a=a, axis=axis, keepdims=keepdims, n=float(n)):
        if not keepdims:
            g = np.reshape(g, _keep_shape(a.shape, axis))
        a._accum(np.broadcast_to(g / n, a.shape).copy())

    out._backward = bwd if out.requires_grad else None
    return out


def amax(a, axis=None, keepdims=False):
    """Max reduction; gradient routed to the first maximum in scan order."""
    a = as_tensor(a)
    y = a.data.max(axis=axis, keepdims=keepdims)
    out = Tensor._make(np.asarray(y), (a,), None)

    def bwd(g, a=a, axis=axis, keepdims=keepdims):
        if axis is None:
            gx = np.zeros(a.data.size, dtype=g.dtype)
            gx[a.data.argmax()] = g.reshape(())
            a._accum(gx.reshape(a.shape))
            return
        if not keepdims:
            g = np.reshape(g, _keep_shape(a.shape, axis))
        arg = a.data.argmax(axis=axis)  # first-tie in scan order
        onehot = np.zeros(a.shape, dtype=g.dtype)
        np.put_along_axis(onehot, np.expand_dims(arg, axis), 1.0, axis=axis)
        a._accum(onehot * g)

    out._backward = bwd if out.requires_grad else None
    return out


def global_avg_pool(x):
    """[C, ...spatial] -> [C]."""
    x = as_tensor(x)
    return tensor_mean(reshape(x, (x.shape[0], -1)), axis=1)


def global_max_pool(x):
    x = as_tensor(x)
    return amax(reshape(x, (x.shape[0], -1)), axis=1)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor._make(a.data.reshape(shape), (a,), None)

    def bwd(g, a=a):
        a._accum(g.reshape(a.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def transpose2d(a):
    a = as_tensor(a)
    out = Tensor._make(np.ascontiguousarray(a.data.T), (a,), None)

    def bwd(g, a=a):
        a._accum(np.ascontiguousarray(g.T))

    out._backward = bwd if out.requires_grad else None
    return out


def broadcast_to(a, shape):
    a = as_tensor(a)
    out = Tensor._make(np.broadcast_to(a.data, shape), (a,), None)

    def bwd(g, a=a):
        a._accum(_unbroadcast(g, a.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: mismatched shapes {[t.shape for t in ts]} on axis {axis}")
    y = np.concatenate([t.data for t in ts], axis=axis)
    out = Tensor._make(y, tuple(ts), None)
    sizes = [t.shape[axis] for t in ts]

    def bwd(g, ts=ts, sizes=sizes, axis=axis):
        offs = np.cumsum([0] + sizes)
        for t, lo, hi in zip(ts, offs[:-1], offs[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(np.ascontiguousarray(g[tuple(idx)]))

    out._backward = bwd if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# gather / scatter
# ---------------------------------------------------------------------------

def gather_rows(x, idx):
    """x: [N, C], idx: int array [M] -> [M, C]."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor._make(x.data[idx], (x,), None)

    def bwd(g, x=x, idx=idx):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        x._accum(gx)

    out._backward = bwd if out.requires_grad else None
    return out


def gather_cols(x, idx):
    """x: [C, N], idx: int array [M] -> [C, M]."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor._make(np.ascontiguousarray(x.data[:, idx]), (x,), None)

    def bwd(g, x=x, idx=idx):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx.T, idx, g.T)
        x._accum(gx)

    out._backward = bwd if out.requires_grad else None
    return out


def scatter_rows(rows, idx, n):
    """rows: [M, C] scattered (summed) into a zero [n, C] at row indices."""
    rows = as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    y = np.zeros((n, rows.shape[1]), dtype=rows.dtype)
    np.add.at(y, idx, rows.data)
    out = Tensor._make(y, (rows,), None)

    def bwd(g, rows=rows, idx=idx):
        rows._accum(g[idx])

    out._backward = bwd if out.requires_grad else None
    return out


def scatter_max(rows, idx, n, fill=0.0):
    """Per-channel max-scatter of rows [M, C] into [n, C]; cells that receive
    no rows keep `fill`. Gradient flows to the first-arriving argmax row."""
    rows = as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    m, c = rows.shape
    y = np.full((n, c), fill, dtype=rows.dtype)
    win = np.full((n, c), -1, dtype=np.int64)
    if m > 0:
        arange = np.arange(m)
        for ch in range(c):
            col = rows.data[:, ch]
            order = np.lexsort((arange, -col, idx))
            si = idx[order]
            heads = np.ones(m, dtype=bool)
            heads[1:] = si[1:] != si[:-1]
            cells = si[heads]
            winners = order[heads]
            y[cells, ch] = col[winners]
            win[cells, ch] = winners
    out = Tensor._make(y, (rows,), None)

    def bwd(g, rows=rows, win=win):
        gx = np.zeros(rows.shape, dtype=g.dtype)
        for ch in range(rows.shape[1]):
            valid = win[:, ch] >= 0
            np.add.at(gx[:, ch], win[valid, ch], g[valid, ch])
        rows._accum(gx)

    out._backward = bwd if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# operator wiring
# ---------------------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = add
Tensor.__mul__ = mul
Tensor.__rmul__ = mul
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda a, b: add(neg(a), b)
Tensor.__truediv__ = div
Tensor.__neg__ = neg
Tensor.sum = tensor_sum
Tensor.mean = tensor_mean
Tensor.max = amax
Tensor.reshape = reshape
