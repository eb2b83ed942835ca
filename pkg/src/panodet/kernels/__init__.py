"""Convolution kernel backend, selected once at import.

Two interchangeable implementations exist: ``cyknl`` (compiled Cython
loops) and ``pyknl`` (numpy, im2col feeding BLAS). Neither dominates:
measured on the shapes this pipeline uses (see benchmarks/bench_kernels.py),
the compiled depthwise kernels win by 3-14x, while BLAS wins the dense
2D/3D convolutions at every desk width. The default ("auto") therefore
mixes per op: compiled depthwise, numpy dense convs.

Set ``PANODET_KERNELS=python`` to force the numpy fallback everywhere,
or ``=compiled`` to require the extension everywhere.
"""

import os

from . import pyknl

_choice = os.environ.get("PANODET_KERNELS", "auto").lower()

if _choice in ("python", "py", "numpy"):
    _conv, _dw = pyknl, pyknl
    BACKEND = "python"
elif _choice == "compiled":
    from . import cyknl  # ImportError here means the ext was not built
    _conv, _dw = cyknl, cyknl
    BACKEND = "compiled"
else:
    try:
        from . import cyknl
        _conv, _dw = pyknl, cyknl
        BACKEND = "mixed"
    except ImportError:
        _conv, _dw = pyknl, pyknl
        BACKEND = "python"

conv2d_forward = _conv.conv2d_forward
conv2d_backward = _conv.conv2d_backward
conv3d_forward = _conv.conv3d_forward
conv3d_backward = _conv.conv3d_backward
depthwise2d_forward = _dw.depthwise2d_forward
depthwise2d_backward = _dw.depthwise2d_backward
