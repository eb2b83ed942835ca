"""Simplified-ConvMLP 2D backbone and its analytic cost model.

An SC block is a per-position MLP with a skip connection followed by a
depthwise conv with a skip connection; it keeps most of a ConvMLP block's
mixing power at a little under half the cost. The backbone stacks plain
conv blocks, a set of SC blocks at full resolution, a strided set at half
resolution, and concatenates both sets at full resolution.

The cost model counts parameters, multiply-accumulates per spatial
position, and activation floats per position from the layer shapes alone;
tests cross-check it against instantiated modules.
"""

from dataclasses import dataclass

import numpy as np

from .autograd import nn, ops
from .blocks import ConvBlock2d


class SCBlock(nn.Module):
    """y1 = x + pw2(relu(pw1(x))); y = y1 + dw(y1). Shape preserving."""

    def __init__(self, c, ratio=2, k=3, identity_init=False, rng=None):
        super().__init__()
        if ratio < 1:
            raise ValueError(f"mlp ratio must be >= 1, got {ratio}")
        if k % 2 == 0:
            raise ValueError(f"depthwise kernel must be odd, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c = c
        self.pw1 = nn.Conv2d(c, ratio * c, k=1, rng=rng)
        self.pw2 = nn.Conv2d(ratio * c, c, k=1, rng=rng)
        self.dw = nn.DepthwiseConv2d(c, k=k, rng=rng)
        if identity_init:
            # zero both residual-branch output layers: the block starts as
            # an exact identity
            self.pw2.weight.data[...] = 0.0
            self.dw.weight.data[...] = 0.0

    def forward(self, x):
        if x.shape[0] != self.c:
            raise ValueError(f"expected {self.c} channels, got {x.shape[0]}")
        y1 = x + self.pw2(ops.relu(self.pw1(x)))
        return y1 + self.dw(y1)


class SCBackbone(nn.Module):
    """Conv stem, SC set at full resolution, strided SC set, concat of both.

    Input [cin,h,w] -> output [width1+width2,h,w]; h and w must be even so
    the half-resolution set can be matched back by 2x upsampling.
    """

    def __init__(self, cin, width1=128, width2=128, n0=2, n1=5, n2=10,
                 ratio=2, k=3, identity_init=False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.out_channels = width1 + width2
        stem = [ConvBlock2d(cin, width1, rng=rng)]
        stem += [ConvBlock2d(width1, width1, rng=rng) for _ in range(n0 - 1)]
        self.stem = nn.Sequential(*stem)
        self.set1 = nn.Sequential(*[
            SCBlock(width1, ratio, k, identity_init, rng=rng)
            for _ in range(n1)])
        self.down = ConvBlock2d(width1, width2, stride=2, rng=rng)
        self.set2 = nn.Sequential(*[
            SCBlock(width2, ratio, k, identity_init, rng=rng)
            for _ in range(n2)])

    def forward(self, x):
        c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"spatial extents must be even to downsample, got {h}x{w}")
        a = self.set1(self.stem(x))
        b = self.set2(self.down(a))
        return ops.concat([a, ops.upsample_nearest2d(b, 2)])


@dataclass(frozen=True)
class CostReport:
    """Static cost of a layer: parameters, MACs and activation floats per
    spatial position (at the layer's own evaluation resolution)."""

    params: int
    macs_per_pos: int
    act_per_pos: int

    def __add__(self, other):
        return CostReport(self.params + other.params,
                          self.macs_per_pos + other.macs_per_pos,
                          self.act_per_pos + other.act_per_pos)


def count_cost(kind, c, ratio=2, k=3, cin=None):
    """Analytic CostReport for one layer.

    kinds: conv3x3 (plain 3x3 conv, cin -> c, biased), sc_block, and
    convmlp_block (the two-MLP original, the comparison baseline).
    """
    cin = c if cin is None else cin
    rc = ratio * c
    if kind == "conv3x3":
        return CostReport(9 * cin * c + c, 9 * cin * c, c)
    if kind == "sc_block":
        mlp_p = (rc * c + rc) + (c * rc + c)
        return CostReport(mlp_p + k * k * c + c,
                          2 * rc * c + k * k * c,
                          rc + 2 * c)
    if kind == "convmlp_block":
        mlp_p = (rc * c + rc) + (c * rc + c)
        return CostReport(2 * mlp_p + k * k * c + c,
                          4 * rc * c + k * k * c,
                          2 * (rc + c) + c)
    raise ValueError(f"unknown layer kind: {kind}")


def reduction_vs_conv(report, c, cin=None):
    """(param_reduction, mac_reduction) of a layer vs the plain 3x3 conv
    at the same width, as fractions in [0, 1)."""
    base = count_cost("conv3x3", c, cin=cin)
    return (1.0 - report.params / base.params,
            1.0 - report.macs_per_pos / base.macs_per_pos)


def backbone_cost(cin, width1=128, width2=128, n0=2, n1=5, n2=10,
                  ratio=2, k=3):
    """Per-layer cost rows for an SCBackbone plus the aggregate.

    Returns (rows, total) where rows are (name, CostReport). The stem and
    downsample rows count the conv only; their batch-norm scale/shift pairs
    are reported separately so the parameter total matches an instantiated
    model exactly.
    """
    rows = [("stem0_conv3x3", CostReport(9 * cin * width1, 9 * cin * width1,
                                         width1)),
            ("stem0_bn", CostReport(2 * width1, 2 * width1, width1))]
    for i in range(1, n0):
        rows.append((f"stem{i}_conv3x3",
                     CostReport(9 * width1 * width1, 9 * width1 * width1,
                                width1)))
        rows.append((f"stem{i}_bn", CostReport(2 * width1, 2 * width1,
                                               width1)))
    for i in range(n1):
        rows.append((f"set1_sc{i}", count_cost("sc_block", width1, ratio, k)))
    rows.append(("down_conv3x3", CostReport(9 * width1 * width2,
                                            9 * width1 * width2, width2)))
    rows.append(("down_bn", CostReport(2 * width2, 2 * width2, width2)))
    for i in range(n2):
        rows.append((f"set2_sc{i}", count_cost("sc_block", width2, ratio, k)))
    total = CostReport(0, 0, 0)
    for _, r in rows:
        total = total + r
    return rows, total
