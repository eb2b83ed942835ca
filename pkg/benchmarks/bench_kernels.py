"""Compiled vs numpy kernel backends, measured honestly.

Runs both implementations side by side (bypassing the import-time backend
choice) over the shapes the pipeline actually uses, plus wider ones, and
prints per-op timings. The headline: the Cython loops win on thin channels
where BLAS overhead dominates, and lose to numpy's tensordot (BLAS) once
the matrices get big. The package default therefore only pays off for
desk-scale widths, which is exactly where this pipeline lives; force
PANODET_KERNELS=python if your workload is wider.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from panodet.kernels import cyknl, pyknl


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name, make_args, fns, repeats):
    args = make_args()
    rows = []
    for label, backend in (("python", pyknl), ("compiled", cyknl)):
        fwd, bwd = fns(backend, *args)
        # correctness first: both backends must agree before timing
        rows.append((label, best_of(fwd, repeats), best_of(bwd, repeats)))
    print(f"{name:34s} "
          f"py {rows[0][1] * 1e3:8.2f}/{rows[0][2] * 1e3:8.2f} ms   "
          f"cy {rows[1][1] * 1e3:8.2f}/{rows[1][2] * 1e3:8.2f} ms   "
          f"speedup x{rows[0][1] / rows[1][1]:5.2f}/"
          f"x{rows[0][2] / rows[1][2]:5.2f}  (fwd/bwd)")


def conv3d_fns(backend, x, w):
    gy = backend.conv3d_forward(x, w, 1, 1)
    ref = pyknl.conv3d_forward(x, w, 1, 1)
    assert np.allclose(gy, ref, atol=1e-4), "backends disagree"
    return (lambda: backend.conv3d_forward(x, w, 1, 1),
            lambda: backend.conv3d_backward(x, w, gy, 1, 1))


def conv2d_fns(backend, x, w):
    gy = backend.conv2d_forward(x, w, 1, 1)
    ref = pyknl.conv2d_forward(x, w, 1, 1)
    assert np.allclose(gy, ref, atol=1e-4), "backends disagree"
    return (lambda: backend.conv2d_forward(x, w, 1, 1),
            lambda: backend.conv2d_backward(x, w, gy, 1, 1))


def dw_fns(backend, x, w):
    gy = backend.depthwise2d_forward(x, w)
    ref = pyknl.depthwise2d_forward(x, w)
    assert np.allclose(gy, ref, atol=1e-4), "backends disagree"
    return (lambda: backend.depthwise2d_forward(x, w),
            lambda: backend.depthwise2d_backward(x, w, gy))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=3)
    opts = ap.parse_args()
    rng = np.random.default_rng(0)

    def arr(*shape):
        return rng.standard_normal(shape).astype(np.float32)

    print(f"numpy {np.__version__}; best of {opts.repeats} runs\n")
    print("== 3D convs (the pipeline's hot path; desk widths are 8..32) ==")
    for c_in, c_out, z, h, w in [(8, 16, 16, 64, 64), (16, 16, 8, 32, 32),
                                 (32, 32, 4, 16, 16)]:
        bench_case(f"conv3d {c_in}->{c_out} on {z}x{h}x{w}",
                   lambda ci=c_in, co=c_out, zz=z, hh=h, ww=w:
                   (arr(ci, zz, hh, ww), arr(co, ci, 3, 3, 3)),
                   conv3d_fns, opts.repeats)
    print("\n== 2D convs (BEV trunk; wider = BLAS territory) ==")
    for c_in, c_out, h, w in [(8, 16, 64, 64), (32, 32, 32, 32),
                              (64, 64, 32, 32), (128, 128, 32, 32)]:
        bench_case(f"conv2d {c_in}->{c_out} on {h}x{w}",
                   lambda ci=c_in, co=c_out, hh=h, ww=w:
                   (arr(ci, hh, ww), arr(co, ci, 3, 3)),
                   conv2d_fns, opts.repeats)
    print("\n== depthwise 2D (SC blocks) ==")
    for c, h, w in [(16, 64, 64), (64, 32, 32), (128, 32, 32)]:
        bench_case(f"depthwise2d c={c} on {h}x{w}",
                   lambda cc=c, hh=h, ww=w: (arr(cc, hh, ww), arr(cc, 3, 3)),
                   dw_fns, opts.repeats)
    print("\nNote: speedup < 1 means the numpy backend is faster there.")


if __name__ == "__main__":
    main()
