"""Pure-numpy convolution kernels (fallback backend).

Same contracts as the compiled backend in ``cyknl``: single-sample layouts
(no batch axis), bias handled by the caller, dtype of the inputs preserved.
Forward uses strided im2col views; input gradients are col2im scatter-adds.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "python"


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _triple(v):
    return (v, v, v) if np.isscalar(v) else tuple(v)


def _patches2d(xp, kh, kw, sh, sw, ho, wo):
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    return as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s1 * sh, s2 * sw),
        writeable=False,
    )


def conv2d_forward(x, w, stride, pad):
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    co, ci, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    ho = (x.shape[1] + 2 * ph - kh) // sh + 1
    wo = (x.shape[2] + 2 * pw - kw) // sw + 1
    cols = _patches2d(xp, kh, kw, sh, sw, ho, wo)
    return np.tensordot(w, cols, axes=([1, 2, 3], [0, 1, 2]))


def conv2d_backward(x, w, gy, stride, pad):
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    co, ci, kh, kw = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = _patches2d(xp, kh, kw, sh, sw, ho, wo)
    gw = np.tensordot(gy, cols, axes=([1, 2], [3, 4]))

    # col2im: distribute w^T . gy back onto the padded input plane
    gcols = np.tensordot(w, gy, axes=([0], [0]))  # [ci, kh, kw, ho, wo]
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[:, i, j]
    h, ww = x.shape[1], x.shape[2]
    gx = gxp[:, ph : ph + h, pw : pw + ww]
    return np.ascontiguousarray(gx), gw


def _patches3d(xp, kd, kh, kw, sd, sh, sw, do, ho, wo):
    c = xp.shape[0]
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(c, kd, kh, kw, do, ho, wo),
        strides=(s0, s1, s2, s3, s1 * sd, s2 * sh, s3 * sw),
        writeable=False,
    )


def conv3d_forward(x, w, stride, pad):
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(pad)
    co, ci, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    do = (x.shape[1] + 2 * pd - kd) // sd + 1
    ho = (x.shape[2] + 2 * ph - kh) // sh + 1
    wo = (x.shape[3] + 2 * pw - kw) // sw + 1
    y = np.zeros((co, do, ho, wo), dtype=x.dtype)
    cols = _patches3d(xp, kd, kh, kw, sd, sh, sw, do, ho, wo)
    # chunk over the depth taps to bound the materialized im2col copy
    for i in range(kd):
        y += np.tensordot(w[:, :, i], cols[:, i], axes=([1, 2, 3], [0, 1, 2]))
    return y


def conv3d_backward(x, w, gy, stride, pad):
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(pad)
    co, ci, kd, kh, kw = w.shape
    do, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    cols = _patches3d(xp, kd, kh, kw, sd, sh, sw, do, ho, wo)
    gw = np.empty_like(w)
    for i in range(kd):
        gw[:, :, i] = np.tensordot(gy, cols[:, i], axes=([1, 2, 3], [3, 4, 5]))

    gxp = np.zeros_like(xp)
    for i in range(kd):
        gcols = np.tensordot(w[:, :, i], gy, axes=([0], [0]))  # [ci,kh,kw,do,ho,wo]
        for j in range(kh):
            for k in range(kw):
                gxp[
                    :,
                    i : i + sd * do : sd,
                    j : j + sh * ho : sh,
                    k : k + sw * wo : sw,
                ] += gcols[:, j, k]
    d, h, ww = x.shape[1], x.shape[2], x.shape[3]
    gx = gxp[:, pd : pd + d, ph : ph + h, pw : pw + ww]
    return np.ascontiguousarray(gx), gw


def depthwise2d_forward(x, w):
    c, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    h, ww = x.shape[1], x.shape[2]
    cols = _patches2d(xp, kh, kw, 1, 1, h, ww)
    return np.einsum("cij,cijhw->chw", w, cols)


def depthwise2d_backward(x, w, gy):
    c, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    h, ww = x.shape[1], x.shape[2]
    cols = _patches2d(xp, kh, kw, 1, 1, h, ww)
    gw = np.einsum("chw,cijhw->cij", gy, cols)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + h, j : j + ww] += w[:, i, j][:, None, None] * gy
    gx = gxp[:, ph : ph + h, pw : pw + ww]
    return np.ascontiguousarray(gx), gw
