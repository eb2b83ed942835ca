"""Shared test oracles.

Naive reference implementations are written as plain loops with no reuse of
library code under test, and the gradient checker recomputes losses through
a float64 path with central finite differences.
"""

import numpy as np

from panodet.autograd import Tensor, no_grad


# ---------------------------------------------------------------------------
# naive references (independent of the kernels / ops modules)
# ---------------------------------------------------------------------------

def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def naive_conv2d(x, w, stride, pad):
    ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    assert ci == ci2
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    ph, pw = (pad, pad) if np.isscalar(pad) else pad
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((co, ho, wo), dtype=np.float64)
    for o in range(co):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            yy = oy * sh - ph + i
                            xx = ox * sw - pw + j
                            if 0 <= yy < h and 0 <= xx < wd:
                                acc += float(x[c, yy, xx]) * float(w[o, c, i, j])
                out[o, oy, ox] = acc
    return out


def naive_conv3d(x, w, stride, pad):
    ci, d, h, wd = x.shape
    co, ci2, kd, kh, kw = w.shape
    assert ci == ci2
    sd, sh, sw = (stride, stride, stride) if np.isscalar(stride) else stride
    pd, ph, pw = (pad, pad, pad) if np.isscalar(pad) else pad
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((co, do, ho, wo), dtype=np.float64)
    for o in range(co):
        for oz in range(do):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for t in range(kd):
                            for i in range(kh):
                                for j in range(kw):
                                    zz = oz * sd - pd + t
                                    yy = oy * sh - ph + i
                                    xx = ox * sw - pw + j
                                    if 0 <= zz < d and 0 <= yy < h and 0 <= xx < wd:
                                        acc += float(x[c, zz, yy, xx]) * float(w[o, c, t, i, j])
                    out[o, oz, oy, ox] = acc
    return out


def naive_depthwise2d(x, w):
    c, h, wd = x.shape
    c2, k, k2 = w.shape
    assert c == c2 and k == k2
    p = k // 2
    out = np.zeros((c, h, wd), dtype=np.float64)
    for ch in range(c):
        for oy in range(h):
            for ox in range(wd):
                acc = 0.0
                for i in range(k):
                    for j in range(k):
                        yy = oy - p + i
                        xx = ox - p + j
                        if 0 <= yy < h and 0 <= xx < wd:
                            acc += float(x[ch, yy, xx]) * float(w[ch, i, j])
                out[ch, oy, ox] = acc
    return out


def naive_conv2d_backward(x, w, gy, stride, pad):
    ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    ph, pw = (pad, pad) if np.isscalar(pad) else pad
    gx = np.zeros_like(x, dtype=np.float64)
    gw = np.zeros_like(w, dtype=np.float64)
    for o in range(co):
        for oy in range(gy.shape[1]):
            for ox in range(gy.shape[2]):
                g = float(gy[o, oy, ox])
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            yy = oy * sh - ph + i
                            xx = ox * sw - pw + j
                            if 0 <= yy < h and 0 <= xx < wd:
                                gx[c, yy, xx] += g * float(w[o, c, i, j])
                                gw[o, c, i, j] += g * float(x[c, yy, xx])
    return gx, gw


def naive_conv3d_backward(x, w, gy, stride, pad):
    ci, d, h, wd = x.shape
    co, _, kd, kh, kw = w.shape
    sd, sh, sw = (stride, stride, stride) if np.isscalar(stride) else stride
    pd, ph, pw = (pad, pad, pad) if np.isscalar(pad) else pad
    gx = np.zeros_like(x, dtype=np.float64)
    gw = np.zeros_like(w, dtype=np.float64)
    for o in range(co):
        for oz in range(gy.shape[1]):
            for oy in range(gy.shape[2]):
                for ox in range(gy.shape[3]):
                    g = float(gy[o, oz, oy, ox])
                    for c in range(ci):
                        for t in range(kd):
                            for i in range(kh):
                                for j in range(kw):
                                    zz = oz * sd - pd + t
                                    yy = oy * sh - ph + i
                                    xx = ox * sw - pw + j
                                    if 0 <= zz < d and 0 <= yy < h and 0 <= xx < wd:
                                        gx[c, zz, yy, xx] += g * float(w[o, c, t, i, j])
                                        gw[o, c, t, i, j] += g * float(x[c, zz, yy, xx])
    return gx, gw


def naive_depthwise2d_backward(x, w, gy):
    c, h, wd = x.shape
    k = w.shape[1]
    p = k // 2
    gx = np.zeros_like(x, dtype=np.float64)
    gw = np.zeros_like(w, dtype=np.float64)
    for ch in range(c):
        for oy in range(h):
            for ox in range(wd):
                g = float(gy[ch, oy, ox])
                for i in range(k):
                    for j in range(k):
                        yy = oy - p + i
                        xx = ox - p + j
                        if 0 <= yy < h and 0 <= xx < wd:
                            gx[ch, yy, xx] += g * float(w[ch, i, j])
                            gw[ch, i, j] += g * float(x[ch, yy, xx])
    return gx, gw


# ---------------------------------------------------------------------------
# finite-difference gradient checking (float64 recompute)
# ---------------------------------------------------------------------------

def rel_err(analytic, fd):
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    fd = np.asarray(fd, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(analytic - fd) / np.maximum(1e-8, np.abs(fd))))


def fd_gradcheck(f, arrays, tol=1e-4):
    """Check gradients of scalar-valued f against central differences.

    f takes len(arrays) Tensors and returns a scalar Tensor. Arrays are
    promoted to float64 and each element is perturbed in turn. Returns the
    worst relative error; asserts it is below tol.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = f(*ts)
    assert loss.size == 1, "gradcheck target must be scalar"
    loss.backward()

    worst = 0.0
    for k, base in enumerate(arrays):
        analytic = ts[k].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        fd = np.zeros(base.size, dtype=np.float64)
        for i in range(base.size):
            fd[i] = _fd_entry(f, arrays, k, i)
        err = rel_err(analytic, fd.reshape(base.shape))
        worst = max(worst, err)
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst


def _fd_entry(f, arrays, k, i):
    orig = arrays[k].reshape(-1)[i]
    h = 1e-6 * max(1.0, abs(orig))

    def value(v):
        xs = [a.copy() for a in arrays]
        xs[k].reshape(-1)[i] = v
        with no_grad():
            return f(*[Tensor(x) for x in xs]).item()

    return (value(orig + h) - value(orig - h)) / (2.0 * h)


def module_gradcheck(make_loss, module, tol=1e-3):
    """Check every parameter gradient of a module against central differences.

    make_loss: zero-arg callable returning a scalar Tensor; it must rerun the
    forward pass from scratch each call. The module should already be cast to
    float64. Passes when |analytic - fd| <= atol + tol * |fd| per element,
    where atol is the finite-difference cancellation-noise bound
    eps * |loss| / h: deviations below what the oracle itself can resolve
    are not failures. Returns the worst noise-adjusted relative error.
    """
    module.zero_grad()
    loss = make_loss()
    loss.backward()
    analytic = {}
    for name, p in module.named_parameters():
        analytic[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)

    h0 = 1e-6
    atol = 50.0 * np.finfo(np.float64).eps * max(1.0, abs(loss.item())) / h0

    worst = 0.0
    for name, p in module.named_parameters():
        flat = p.data.reshape(-1)
        fd = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            h = h0 * max(1.0, abs(orig))
            flat[i] = orig + h
            with no_grad():
                up = make_loss().item()
            flat[i] = orig - h
            with no_grad():
                dn = make_loss().item()
            flat[i] = orig
            fd[i] = (up - dn) / (2.0 * h)
        a = analytic[name].reshape(-1)
        excess = (np.abs(a - fd) - atol) / np.maximum(1e-8, np.abs(fd))
        err = float(excess.max())
        worst = max(worst, err)
    assert worst < tol, f"module gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst
