# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels.

Direct convolutions over contiguous single-sample arrays, blocked four
channels at a time so each input row load feeds four fused multiply-adds.
Outputs accumulate in stack tiles and weight gradients reduce through eight
fixed lanes, so summation order is deterministic run to run. float32 and
float64 are both supported through a fused type; the caller must pass
matching dtypes.
"""

import numpy as np

ctypedef fused real:
    float
    double

NAME = "compiled"

DEF TILE = 64   # output tile width, lives on the stack
DEF CB = 4      # channel block
DEF LANES = 8   # reduction lanes for weight gradients


cdef inline Py_ssize_t _floordiv(Py_ssize_t a, Py_ssize_t b) noexcept:
    # cdivision truncates toward zero; we need floor for negative numerators
    cdef Py_ssize_t q = a // b
    if a % b != 0 and (a < 0) != (b < 0):
        q -= 1
    return q


cdef inline Py_ssize_t _ceildiv(Py_ssize_t a, Py_ssize_t b) noexcept:
    return -_floordiv(-a, b)


cdef inline Py_ssize_t _pmod(Py_ssize_t a, Py_ssize_t b) noexcept:
    cdef Py_ssize_t r = a % b
    if r < 0:
        r += b
    return r


cdef inline real _lanesum(real* lanes) noexcept:
    return (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
            + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))


# ---------------------------------------------------------------------------
# tile primitives
#
# acc tiles accumulate wv * row[base + t*sw] over t in [tlo, thi). The four
# way variants share one row load per element across four weight scalars.
# ---------------------------------------------------------------------------

cdef inline void _axpy_tile(real* acc, const real* row, real wv,
                            Py_ssize_t base, Py_ssize_t sw,
                            Py_ssize_t tlo, Py_ssize_t thi) noexcept:
    cdef Py_ssize_t t
    if sw == 1:
        for t in range(tlo, thi):
            acc[t] += wv * row[base + t]
    else:
        for t in range(tlo, thi):
            acc[t] += wv * row[base + t * sw]


cdef inline void _axpy_tile4(real* a0, real* a1, real* a2, real* a3,
                             const real* row,
                             real w0, real w1, real w2, real w3,
                             Py_ssize_t base, Py_ssize_t sw,
                             Py_ssize_t tlo, Py_ssize_t thi) noexcept:
    cdef Py_ssize_t t
    cdef real xv
    if sw == 1:
        for t in range(tlo, thi):
            xv = row[base + t]
            a0[t] += w0 * xv
            a1[t] += w1 * xv
            a2[t] += w2 * xv
            a3[t] += w3 * xv
    else:
        for t in range(tlo, thi):
            xv = row[base + t * sw]
            a0[t] += w0 * xv
            a1[t] += w1 * xv
            a2[t] += w2 * xv
            a3[t] += w3 * xv


cdef inline void _gather_tile(real* acc, const real* gyrow, real wv,
                              Py_ssize_t t0, Py_ssize_t tmax, Py_ssize_t sw,
                              Py_ssize_t ox0) noexcept:
    # acc[t] += wv * gyrow[ox], t stepping by sw while ox steps by 1
    cdef Py_ssize_t t = t0, ox = ox0
    if sw == 1:
        for t in range(t0, tmax):
            acc[t] += wv * gyrow[ox0 + t - t0]
    else:
        while t < tmax:
            acc[t] += wv * gyrow[ox]
            t += sw
            ox += 1


cdef inline void _gather_tile4(real* a0, real* a1, real* a2, real* a3,
                               const real* gyrow,
                               real w0, real w1, real w2, real w3,
                               Py_ssize_t t0, Py_ssize_t tmax, Py_ssize_t sw,
                               Py_ssize_t ox0) noexcept:
    cdef Py_ssize_t t = t0, ox = ox0
    cdef real gv
    if sw == 1:
        for t in range(t0, tmax):
            gv = gyrow[ox0 + t - t0]
            a0[t] += w0 * gv
            a1[t] += w1 * gv
            a2[t] += w2 * gv
            a3[t] += w3 * gv
    else:
        while t < tmax:
            gv = gyrow[ox]
            a0[t] += w0 * gv
            a1[t] += w1 * gv
            a2[t] += w2 * gv
            a3[t] += w3 * gv
            t += sw
            ox += 1


cdef inline void _dot_rows(real* lanes, const real* gyrow, const real* xrow,
                           Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t sw,
                           Py_ssize_t off) noexcept:
    # lanes[l] += gyrow[t] * xrow[t*sw + off] over t in [lo, hi)
    cdef Py_ssize_t t = lo, l
    if sw == 1:
        while t + LANES <= hi:
            for l in range(LANES):
                lanes[l] = lanes[l] + gyrow[t + l] * xrow[t + l + off]
            t += LANES
    else:
        while t + LANES <= hi:
            for l in range(LANES):
                lanes[l] = lanes[l] + gyrow[t + l] * xrow[(t + l) * sw + off]
            t += LANES
    while t < hi:
        lanes[0] += gyrow[t] * xrow[t * sw + off]
        t += 1


cdef inline void _dot_rows4(real* l0, real* l1, real* l2, real* l3,
                            const real* gyrow,
                            const real* x0, const real* x1,
                            const real* x2, const real* x3,
                            Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t sw,
                            Py_ssize_t off) noexcept:
    cdef Py_ssize_t t = lo, l, u
    cdef real gv
    if sw == 1:
        while t + LANES <= hi:
            for l in range(LANES):
                gv = gyrow[t + l]
                l0[l] = l0[l] + gv * x0[t + l + off]
                l1[l] = l1[l] + gv * x1[t + l + off]
                l2[l] = l2[l] + gv * x2[t + l + off]
                l3[l] = l3[l] + gv * x3[t + l + off]
            t += LANES
    else:
        while t + LANES <= hi:
            for l in range(LANES):
                gv = gyrow[t + l]
                u = (t + l) * sw + off
                l0[l] = l0[l] + gv * x0[u]
                l1[l] = l1[l] + gv * x1[u]
                l2[l] = l2[l] + gv * x2[u]
                l3[l] = l3[l] + gv * x3[u]
            t += LANES
    while t < hi:
        gv = gyrow[t]
        u = t * sw + off
        l0[0] += gv * x0[u]
        l1[0] += gv * x1[u]
        l2[0] += gv * x2[u]
        l3[0] += gv * x3[u]
        t += 1


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def _conv2d_fwd(real[:, :, ::1] x, real[:, :, :, ::1] w, real[:, :, ::1] y,
                Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t ci_n = x.shape[0], h = x.shape[1], wdt = x.shape[2]
    cdef Py_ssize_t co_n = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = y.shape[1], wo = y.shape[2]
    cdef Py_ssize_t co_full = co_n - co_n % CB
    cdef Py_ssize_t co, ci, i, j, oy, ox0, t, n, xi, base, tlo, thi
    cdef real acc0[TILE]
    cdef real acc1[TILE]
    cdef real acc2[TILE]
    cdef real acc3[TILE]
    cdef const real* xrow
    for co in range(0, co_full, CB):
        for oy in range(ho):
            for ox0 in range(0, wo, TILE):
                n = wo - ox0
                if n > TILE:
                    n = TILE
                for t in range(n):
                    acc0[t] = 0
                    acc1[t] = 0
                    acc2[t] = 0
                    acc3[t] = 0
                for ci in range(ci_n):
                    for i in range(kh):
                        xi = oy * sh - ph + i
                        if xi < 0 or xi >= h:
                            continue
                        xrow = &x[ci, xi, 0]
                        for j in range(kw):
                            base = ox0 * sw - pw + j
                            tlo = 0 if base >= 0 else _ceildiv(-base, sw)
                            thi = _ceildiv(wdt - base, sw)
                            if thi > n:
                                thi = n
                            _axpy_tile4(acc0, acc1, acc2, acc3, xrow,
                                        w[co, ci, i, j], w[co + 1, ci, i, j],
                                        w[co + 2, ci, i, j], w[co + 3, ci, i, j],
                                        base, sw, tlo, thi)
                for t in range(n):
                    y[co, oy, ox0 + t] = acc0[t]
                    y[co + 1, oy, ox0 + t] = acc1[t]
                    y[co + 2, oy, ox0 + t] = acc2[t]
                    y[co + 3, oy, ox0 + t] = acc3[t]
    for co in range(co_full, co_n):
        for oy in range(ho):
            for ox0 in range(0, wo, TILE):
                n = wo - ox0
                if n > TILE:
                    n = TILE
                for t in range(n):
                    acc0[t] = 0
                for ci in range(ci_n):
                    for i in range(kh):
                        xi = oy * sh - ph + i
                        if xi < 0 or xi >= h:
                            continue
                        xrow = &x[ci, xi, 0]
                        for j in range(kw):
                            base = ox0 * sw - pw + j
                            tlo = 0 if base >= 0 else _ceildiv(-base, sw)
                            thi = _ceildiv(wdt - base, sw)
                            if thi > n:
                                thi = n
                            _axpy_tile(acc0, xrow, w[co, ci, i, j],
                                       base, sw, tlo, thi)
                for t in range(n):
                    y[co, oy, ox0 + t] = acc0[t]


def _conv2d_bwd_x(real[:, :, ::1] gx, real[:, :, :, ::1] w, real[:, :, ::1] gy,
                  Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t ci_n = gx.shape[0], h = gx.shape[1], wdt = gx.shape[2]
    cdef Py_ssize_t co_n = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2]
    cdef Py_ssize_t ci_full = ci_n - ci_n % CB
    cdef Py_ssize_t ci, co, i, j, xi, xj0, t, n, u, oy, v0, tmin, tmax, r, t0, ox
    cdef real acc0[TILE]
    cdef real acc1[TILE]
    cdef real acc2[TILE]
    cdef real acc3[TILE]
    cdef const real* gyrow
    for ci in range(0, ci_full, CB):
        for xi in range(h):
            for xj0 in range(0, wdt, TILE):
                n = wdt - xj0
                if n > TILE:
                    n = TILE
                for t in range(n):
                    acc0[t] = 0
                    acc1[t] = 0
                    acc2[t] = 0
                    acc3[t] = 0
                for co in range(co_n):
                    for i in range(kh):
                        u = xi + ph - i
                        if u < 0 or u % sh != 0:
                            continue
                        oy = u // sh
                        if oy >= ho:
                            continue
                        gyrow = &gy[co, oy, 0]
                        for j in range(kw):
                            v0 = xj0 + pw - j
                            tmin = -v0 if v0 < 0 else 0
                            tmax = wo * sw - v0
                            if tmax > n:
                                tmax = n
                            r = _pmod(v0 + tmin, sw)
                            t0 = tmin if r == 0 else tmin + (sw - r)
                            if t0 < tmax:
                                ox = (v0 + t0) // sw
                                _gather_tile4(acc0, acc1, acc2, acc3, gyrow,
                                              w[co, ci, i, j], w[co, ci + 1, i, j],
                                              w[co, ci + 2, i, j], w[co, ci + 3, i, j],
                                              t0, tmax, sw, ox)
                for t in range(n):
                    gx[ci, xi, xj0 + t] = acc0[t]
                    gx[ci + 1, xi, xj0 + t] = acc1[t]
                    gx[ci + 2, xi, xj0 + t] = acc2[t]
                    gx[ci + 3, xi, xj0 + t] = acc3[t]
    for ci in range(ci_full, ci_n):
        for xi in range(h):
            for xj0 in range(0, wdt, TILE):
                n = wdt - xj0
                if n > TILE:
                    n = TILE
                for t in range(n):
                    acc0[t] = 0
                for co in range(co_n):
                    for i in range(kh):
                        u = xi + ph - i
                        if u < 0 or u % sh != 0:
                            continue
                        oy = u // sh
                        if oy >= ho:
                            continue
                        gyrow = &gy[co, oy, 0]
                        for j in range(kw):
                            v0 = xj0 + pw - j
                            tmin = -v0 if v0 < 0 else 0
                            tmax = wo * sw - v0
                            if tmax > n:
                                tmax = n
                            r = _pmod(v0 + tmin, sw)
                            t0 = tmin if r == 0 else tmin + (sw - r)
                            if t0 < tmax:
                                ox = (v0 + t0) // sw
                                _gather_tile(acc0, gyrow, w[co, ci, i, j],
                                             t0, tmax, sw, ox)
                for t in range(n):
                    gx[ci, xi, xj0 + t] = acc0[t]


def _conv2d_bwd_w(real[:, :, ::1] x, real[:, :, :, ::1] gw, real[:, :, ::1] gy,
                  Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t ci_n = x.shape[0], h = x.shape[1], wdt = x.shape[2]
    cdef Py_ssize_t co_n = gw.shape[0], kh = gw.shape[2], kw = gw.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2]
    cdef Py_ssize_t ci_full = ci_n - ci_n % CB
    cdef Py_ssize_t co, ci, i, j, oy, l, xi, olo, ohi, lo, hi, off
    cdef real l0[LANES]
    cdef real l1[LANES]
    cdef real l2[LANES]
    cdef real l3[LANES]
    for co in range(co_n):
        for i in range(kh):
            olo = _ceildiv(ph - i, sh)
            if olo < 0:
                olo = 0
            ohi = _floordiv(h - 1 + ph - i, sh) + 1
            if ohi > ho:
                ohi = ho
            for j in range(kw):
                lo = _ceildiv(pw - j, sw)
                if lo < 0:
                    lo = 0
                hi = _floordiv(wdt - 1 + pw - j, sw) + 1
                if hi > wo:
                    hi = wo
                off = j - pw
                for ci in range(0, ci_full, CB):
                    for l in range(LANES):
                        l0[l] = 0
                        l1[l] = 0
                        l2[l] = 0
                        l3[l] = 0
                    for oy in range(olo, ohi):
                        xi = oy * sh - ph + i
                        _dot_rows4(l0, l1, l2, l3, &gy[co, oy, 0],
                                   &x[ci, xi, 0], &x[ci + 1, xi, 0],
                                   &x[ci + 2, xi, 0], &x[ci + 3, xi, 0],
                                   lo, hi, sw, off)
                    gw[co, ci, i, j] = _lanesum(l0)
                    gw[co, ci + 1, i, j] = _lanesum(l1)
                    gw[co, ci + 2, i, j] = _lanesum(l2)
                    gw[co, ci + 3, i, j] = _lanesum(l3)
                for ci in range(ci_full, ci_n):
                    for l in range(LANES):
                        l0[l] = 0
                    for oy in range(olo, ohi):
                        xi = oy * sh - ph + i
                        _dot_rows(l0, &gy[co, oy, 0], &x[ci, xi, 0],
                                  lo, hi, sw, off)
                    gw[co, ci, i, j] = _lanesum(l0)


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------

def _conv3d_fwd(real[:, :, :, ::1] x, real[:, :, :, :, ::1] w,
                real[:, :, :, ::1] y,
                Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                Py_ssize_t pd, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t ci_n = x.shape[0], d = x.shape[1], h = x.shape[2], wdt = x.shape[3]
    cdef Py_ssize_t co_n = w.shape[0], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t do_n = y.shape[1], ho = y.shape[2], wo = y.shape[3]
    cdef Py_ssize_t co_full = co_n - co_n % CB
    cdef Py_ssize_t co, ci, td, i, j, od, oy, ox0, t, n, xd, xi, base, tlo, thi
    cdef real acc0[TILE]
    cdef real acc1[TILE]
    cdef real acc2[TILE]
    cdef real acc3[TILE]
    cdef const real* xrow
    for co in range(0, co_full, CB):
        for od in range(do_n):
            for oy in range(ho):
                for ox0 in range(0, wo, TILE):
                    n = wo - ox0
                    if n > TILE:
                        n = TILE
                    for t in range(n):
                        acc0[t] = 0
                        acc1[t] = 0
                        acc2[t] = 0
                        acc3[t] = 0
                    for ci in range(ci_n):
                        for td in range(kd):
                            xd = od * sd - pd + td
                            if xd < 0 or xd >= d:
                                continue
                            for i in range(kh):
                                xi = oy * sh - ph + i
                                if xi < 0 or xi >= h:
                                    continue
                                xrow = &x[ci, xd, xi, 0]
                                for j in range(kw):
                                    base = ox0 * sw - pw + j
                                    tlo = 0 if base >= 0 else _ceildiv(-base, sw)
                                    thi = _ceildiv(wdt - base, sw)
                                    if thi > n:
                                        thi = n
                                    _axpy_tile4(acc0, acc1, acc2, acc3, xrow,
                                                w[co, ci, td, i, j],
                                                w[co + 1, ci, td, i, j],
                                                w[co + 2, ci, td, i, j],
                                                w[co + 3, ci, td, i, j],
                                                base, sw, tlo, thi)
                    for t in range(n):
                        y[co, od, oy, ox0 + t] = acc0[t]
                        y[co + 1, od, oy, ox0 + t] = acc1[t]
                        y[co + 2, od, oy, ox0 + t] = acc2[t]
                        y[co + 3, od, oy, ox0 + t] = acc3[t]
    for co in range(co_full, co_n):
        for od in range(do_n):
            for oy in range(ho):
                for ox0 in range(0, wo, TILE):
                    n = wo - ox0
                    if n > TILE:
                        n = TILE
                    for t in range(n):
                        acc0[t] = 0
                    for ci in range(ci_n):
                        for td in range(kd):
                            xd = od * sd - pd + td
                            if xd < 0 or xd >= d:
                                continue
                            for i in range(kh):
                                xi = oy * sh - ph + i
                                if xi < 0 or xi >= h:
                                    continue
                                xrow = &x[ci, xd, xi, 0]
                                for j in range(kw):
                                    base = ox0 * sw - pw + j
                                    tlo = 0 if base >= 0 else _ceildiv(-base, sw)
                                    thi = _ceildiv(wdt - base, sw)
                                    if thi > n:
                                        thi = n
                                    _axpy_tile(acc0, xrow, w[co, ci, td, i, j],
                                               base, sw, tlo, thi)
                    for t in range(n):
                        y[co, od, oy, ox0 + t] = acc0[t]


def _conv3d_bwd_x(real[:, :, :, ::1] gx, real[:, :, :, :, ::1] w,
                  real[:, :, :, ::1] gy,
                  Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                  Py_ssize_t pd, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t ci_n = gx.shape[0], d = gx.shape[1], h = gx.shape[2], wdt = gx.shape[3]
    cdef Py_ssize_t co_n = w.shape[0], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t do_n = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t ci_full = ci_n - ci_n % CB
    cdef Py_ssize_t ci, co, td, i, j, xd, xi, xj0, t, n, u, od, oy
    cdef Py_ssize_t v0, tmin, tmax, r, t0, ox
    cdef real acc0[TILE]
    cdef real acc1[TILE]
    cdef real acc2[TILE]
    cdef real acc3[TILE]
    cdef const real* gyrow
    for ci in range(0, ci_full, CB):
        for xd in range(d):
            for xi in range(h):
                for xj0 in range(0, wdt, TILE):
                    n = wdt - xj0
                    if n > TILE:
                        n = TILE
                    for t in range(n):
                        acc0[t] = 0
                        acc1[t] = 0
                        acc2[t] = 0
                        acc3[t] = 0
                    for co in range(co_n):
                        for td in range(kd):
                            u = xd + pd - td
                            if u < 0 or u % sd != 0:
                                continue
                            od = u // sd
                            if od >= do_n:
                                continue
                            for i in range(kh):
                                u = xi + ph - i
                                if u < 0 or u % sh != 0:
                                    continue
                                oy = u // sh
                                if oy >= ho:
                                    continue
                                gyrow = &gy[co, od, oy, 0]
                                for j in range(kw):
                                    v0 = xj0 + pw - j
                                    tmin = -v0 if v0 < 0 else 0
                                    tmax = wo * sw - v0
                                    if tmax > n:
                                        tmax = n
                                    r = _pmod(v0 + tmin, sw)
                                    t0 = tmin if r == 0 else tmin + (sw - r)
                                    if t0 < tmax:
                                        ox = (v0 + t0) // sw
                                        _gather_tile4(acc0, acc1, acc2, acc3, gyrow,
                                                      w[co, ci, td, i, j],
                                                      w[co, ci + 1, td, i, j],
                                                      w[co, ci + 2, td, i, j],
                                                      w[co, ci + 3, td, i, j],
                                                      t0, tmax, sw, ox)
                    for t in range(n):
                        gx[ci, xd, xi, xj0 + t] = acc0[t]
                        gx[ci + 1, xd, xi, xj0 + t] = acc1[t]
                        gx[ci + 2, xd, xi, xj0 + t] = acc2[t]
                        gx[ci + 3, xd, xi, xj0 + t] = acc3[t]
    for ci in range(ci_full, ci_n):
        for xd in range(d):
            for xi in range(h):
                for xj0 in range(0, wdt, TILE):
                    n = wdt - xj0
                    if n > TILE:
                        n = TILE
                    for t in range(n):
                        acc0[t] = 0
                    for co in range(co_n):
                        for td in range(kd):
                            u = xd + pd - td
                            if u < 0 or u % sd != 0:
                                continue
                            od = u // sd
                            if od >= do_n:
                                continue
                            for i in range(kh):
                                u = xi + ph - i
                                if u < 0 or u % sh != 0:
                                    continue
                                oy = u // sh
                                if oy >= ho:
                                    continue
                                gyrow = &gy[co, od, oy, 0]
                                for j in range(kw):
                                    v0 = xj0 + pw - j
                                    tmin = -v0 if v0 < 0 else 0
                                    tmax = wo * sw - v0
                                    if tmax > n:
                                        tmax = n
                                    r = _pmod(v0 + tmin, sw)
                                    t0 = tmin if r == 0 else tmin + (sw - r)
                                    if t0 < tmax:
                                        ox = (v0 + t0) // sw
                                        _gather_tile(acc0, gyrow,
                                                     w[co, ci, td, i, j],
                                                     t0, tmax, sw, ox)
                    for t in range(n):
                        gx[ci, xd, xi, xj0 + t] = acc0[t]


def _conv3d_bwd_w(real[:, :, :, ::1] x, real[:, :, :, :, ::1] gw,
                  real[:, :, :, ::1] gy,
                  Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                  Py_ssize_t pd, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t ci_n = x.shape[0], d = x.shape[1], h = x.shape[2], wdt = x.shape[3]
    cdef Py_ssize_t co_n = gw.shape[0], kd = gw.shape[2], kh = gw.shape[3], kw = gw.shape[4]
    cdef Py_ssize_t do_n = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t ci_full = ci_n - ci_n % CB
    cdef Py_ssize_t co, ci, td, i, j, od, oy, l, xd, xi
    cdef Py_ssize_t dlo, dhi, olo, ohi, lo, hi, off
    cdef real l0[LANES]
    cdef real l1[LANES]
    cdef real l2[LANES]
    cdef real l3[LANES]
    for co in range(co_n):
        for td in range(kd):
            dlo = _ceildiv(pd - td, sd)
            if dlo < 0:
                dlo = 0
            dhi = _floordiv(d - 1 + pd - td, sd) + 1
            if dhi > do_n:
                dhi = do_n
            for i in range(kh):
                olo = _ceildiv(ph - i, sh)
                if olo < 0:
                    olo = 0
                ohi = _floordiv(h - 1 + ph - i, sh) + 1
                if ohi > ho:
                    ohi = ho
                for j in range(kw):
                    lo = _ceildiv(pw - j, sw)
                    if lo < 0:
                        lo = 0
                    hi = _floordiv(wdt - 1 + pw - j, sw) + 1
                    if hi > wo:
                        hi = wo
                    off = j - pw
                    for ci in range(0, ci_full, CB):
                        for l in range(LANES):
                            l0[l] = 0
                            l1[l] = 0
                            l2[l] = 0
                            l3[l] = 0
                        for od in range(dlo, dhi):
                            xd = od * sd - pd + td
                            for oy in range(olo, ohi):
                                xi = oy * sh - ph + i
                                _dot_rows4(l0, l1, l2, l3, &gy[co, od, oy, 0],
                                           &x[ci, xd, xi, 0], &x[ci + 1, xd, xi, 0],
                                           &x[ci + 2, xd, xi, 0], &x[ci + 3, xd, xi, 0],
                                           lo, hi, sw, off)
                        gw[co, ci, td, i, j] = _lanesum(l0)
                        gw[co, ci + 1, td, i, j] = _lanesum(l1)
                        gw[co, ci + 2, td, i, j] = _lanesum(l2)
                        gw[co, ci + 3, td, i, j] = _lanesum(l3)
                    for ci in range(ci_full, ci_n):
                        for l in range(LANES):
                            l0[l] = 0
                        for od in range(dlo, dhi):
                            xd = od * sd - pd + td
                            for oy in range(olo, ohi):
                                xi = oy * sh - ph + i
                                _dot_rows(l0, &gy[co, od, oy, 0], &x[ci, xd, xi, 0],
                                          lo, hi, sw, off)
                        gw[co, ci, td, i, j] = _lanesum(l0)


# ---------------------------------------------------------------------------
# depthwise conv2d (stride 1, same padding, odd kernel)
# ---------------------------------------------------------------------------

def _dw2d_fwd(real[:, :, ::1] x, real[:, :, ::1] w, real[:, :, ::1] y):
    cdef Py_ssize_t c_n = x.shape[0], h = x.shape[1], wdt = x.shape[2]
    cdef Py_ssize_t k = w.shape[1], p = w.shape[1] // 2
    cdef Py_ssize_t c, i, j, oy, ox0, t, n, xi, base, tlo, thi
    cdef real acc[TILE]
    for c in range(c_n):
        for oy in range(h):
            for ox0 in range(0, wdt, TILE):
                n = wdt - ox0
                if n > TILE:
                    n = TILE
                for t in range(n):
                    acc[t] = 0
                for i in range(k):
                    xi = oy - p + i
                    if xi < 0 or xi >= h:
                        continue
                    for j in range(k):
                        base = ox0 - p + j
                        tlo = -base if base < 0 else 0
                        thi = wdt - base
                        if thi > n:
                            thi = n
                        _axpy_tile(acc, &x[c, xi, 0], w[c, i, j], base, 1, tlo, thi)
                for t in range(n):
                    y[c, oy, ox0 + t] = acc[t]


def _dw2d_bwd_x(real[:, :, ::1] gx, real[:, :, ::1] w, real[:, :, ::1] gy):
    cdef Py_ssize_t c_n = gx.shape[0], h = gx.shape[1], wdt = gx.shape[2]
    cdef Py_ssize_t k = w.shape[1], p = w.shape[1] // 2
    cdef Py_ssize_t c, i, j, xi, xj0, t, n, oy, base, tlo, thi
    cdef real acc[TILE]
    for c in range(c_n):
        for xi in range(h):
            for xj0 in range(0, wdt, TILE):
                n = wdt - xj0
                if n > TILE:
                    n = TILE
                for t in range(n):
                    acc[t] = 0
                for i in range(k):
                    oy = xi + p - i
                    if oy < 0 or oy >= h:
                        continue
                    for j in range(k):
                        base = xj0 + p - j
                        tlo = -base if base < 0 else 0
                        thi = wdt - base
                        if thi > n:
                            thi = n
                        _axpy_tile(acc, &gy[c, oy, 0], w[c, i, j], base, 1, tlo, thi)
                for t in range(n):
                    gx[c, xi, xj0 + t] = acc[t]


def _dw2d_bwd_w(real[:, :, ::1] x, real[:, :, ::1] gw, real[:, :, ::1] gy):
    cdef Py_ssize_t c_n = x.shape[0], h = x.shape[1], wdt = x.shape[2]
    cdef Py_ssize_t k = gw.shape[1], p = gw.shape[1] // 2
    cdef Py_ssize_t c, i, j, oy, l, xi, olo, ohi, lo, hi, off
    cdef real lanes[LANES]
    for c in range(c_n):
        for i in range(k):
            olo = p - i
            if olo < 0:
                olo = 0
            ohi = h + p - i
            if ohi > h:
                ohi = h
            for j in range(k):
                lo = p - j
                if lo < 0:
                    lo = 0
                hi = wdt + p - j
                if hi > wdt:
                    hi = wdt
                off = j - p
                for l in range(LANES):
                    lanes[l] = 0
                for oy in range(olo, ohi):
                    xi = oy - p + i
                    _dot_rows(lanes, &gy[c, oy, 0], &x[c, xi, 0], lo, hi, 1, off)
                gw[c, i, j] = _lanesum(lanes)


# ---------------------------------------------------------------------------
# wrappers
# ---------------------------------------------------------------------------

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _triple(v):
    return (v, v, v) if isinstance(v, int) else tuple(v)


def conv2d_forward(x, w, stride, pad):
    stride = _pair(stride)
    pad = _pair(pad)
    co = w.shape[0]
    ho = (x.shape[1] + 2 * pad[0] - w.shape[2]) // stride[0] + 1
    wo = (x.shape[2] + 2 * pad[1] - w.shape[3]) // stride[1] + 1
    y = np.empty((co, ho, wo), dtype=x.dtype)
    _conv2d_fwd(x, w, y, stride[0], stride[1], pad[0], pad[1])
    return y


def conv2d_backward(x, w, gy, stride, pad):
    stride = _pair(stride)
    pad = _pair(pad)
    gx = np.empty_like(x)
    gw = np.empty_like(w)
    _conv2d_bwd_x(gx, w, gy, stride[0], stride[1], pad[0], pad[1])
    _conv2d_bwd_w(x, gw, gy, stride[0], stride[1], pad[0], pad[1])
    return gx, gw


def conv3d_forward(x, w, stride, pad):
    stride = _triple(stride)
    pad = _triple(pad)
    co = w.shape[0]
    do = (x.shape[1] + 2 * pad[0] - w.shape[2]) // stride[0] + 1
    ho = (x.shape[2] + 2 * pad[1] - w.shape[3]) // stride[1] + 1
    wo = (x.shape[3] + 2 * pad[2] - w.shape[4]) // stride[2] + 1
    y = np.empty((co, do, ho, wo), dtype=x.dtype)
    _conv3d_fwd(x, w, y, stride[0], stride[1], stride[2], pad[0], pad[1], pad[2])
    return y


def conv3d_backward(x, w, gy, stride, pad):
    stride = _triple(stride)
    pad = _triple(pad)
    gx = np.empty_like(x)
    gw = np.empty_like(w)
    _conv3d_bwd_x(gx, w, gy, stride[0], stride[1], stride[2], pad[0], pad[1], pad[2])
    _conv3d_bwd_w(x, gw, gy, stride[0], stride[1], stride[2], pad[0], pad[1], pad[2])
    return gx, gw


def depthwise2d_forward(x, w):
    y = np.empty_like(x)
    _dw2d_fwd(x, w, y)
    return y


def depthwise2d_backward(x, w, gy):
    gx = np.empty_like(x)
    gw = np.empty_like(w)
    _dw2d_bwd_x(gx, w, gy)
    _dw2d_bwd_w(x, gw, gy)
    return gx, gw
