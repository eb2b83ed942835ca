"""Dual-task 3D backbone: a strided conv3d pyramid over the voxel volume.

Produces three scales: s1 [c1, Z/2, H/2, W/2], s2 [c1, Z/4, H/4, W/4] and
s3 [c2, Z/16, H/8, W/8] (stage C adds a height-only stride). s1/s2 feed the
instance-feature path, s3 feeds the BEV detection backbone, and all three
are projected to the range view for panoptic fusion. Also hosts the CBAM
fusion block used at those projection points.
"""

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, nn, ops


@dataclass
class ScalePyramid:
    s1: Tensor  # [c1, Z/2, H/2, W/2]
    s2: Tensor  # [c1, Z/4, H/4, W/4]
    s3: Tensor  # [c2, Z/16, H/8, W/8]


class ConvBlock3d(nn.Module):
    """conv3d + batch norm + ReLU; residual when the shape is preserved."""

    def __init__(self, cin, cout, stride=1, rng=None):
        super().__init__()
        # no conv bias: the batch norm absorbs any constant shift
        self.conv = nn.Conv3d(cin, cout, k=3, stride=stride, bias=False, rng=rng)
        self.bn = nn.BatchNorm(cout)
        st = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
        self.residual = (cin == cout and st == (1, 1, 1))

    def forward(self, x):
        y = self.bn(self.conv(x))
        if self.residual:
            y = y + x
        return ops.relu(y)


class Backbone3d(nn.Module):
    """Stages: A = stride 1 then (2,2,2); B = (2,2,2) then 1; C = (2,2,2)
    then (2,1,1), widening to c2 at C's first block."""

    def __init__(self, c0, c1, c2, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.a1 = ConvBlock3d(c0, c1, 1, rng)
        self.a2 = ConvBlock3d(c1, c1, (2, 2, 2), rng)
        self.b1 = ConvBlock3d(c1, c1, (2, 2, 2), rng)
        self.b2 = ConvBlock3d(c1, c1, 1, rng)
        self.c1 = ConvBlock3d(c1, c2, (2, 2, 2), rng)
        self.c2 = ConvBlock3d(c2, c2, (2, 1, 1), rng)

    def forward(self, v):
        c, z, h, w = v.shape
        if z % 16 or h % 8 or w % 8:
            raise ValueError(f"grid {z}x{h}x{w} too small for the /16,/8,/8 pyramid")
        s1 = self.a2(self.a1(v))
        s2 = self.b2(self.b1(s1))
        s3 = self.c2(self.c1(s2))
        return ScalePyramid(s1, s2, s3)


class ChannelAttention(nn.Module):
    """Shared two-layer MLP over global avg and max descriptors."""

    def __init__(self, c, reduction=4, rng=None):
        super().__init__()
        hidden = max(1, c // reduction)
        self.fc1 = nn.Linear(c, hidden, rng=rng)
        self.fc2 = nn.Linear(hidden, c, rng=rng)

    def forward(self, x):
        avg = ops.global_avg_pool(x)
        mx = ops.global_max_pool(x)
        score = (self.fc2(ops.relu(self.fc1(avg)))
                 + self.fc2(ops.relu(self.fc1(mx))))
        return ops.sigmoid(score)


class CBAM(nn.Module):
    """Fuse an RV feature map with projected voxel features.

    Concatenates the two maps, compresses back to C with a 1x1 conv, then
    applies channel attention followed by spatial attention (k x k conv over
    the channel-wise avg/max maps). Both gates are sigmoids in (0,1).
    """

    def __init__(self, c, spatial_k=7, reduction=4, rng=None):
        super().__init__()
        self.fuse = nn.Conv2d(2 * c, c, k=1, padding=0, rng=rng)
        self.channel = ChannelAttention(c, reduction, rng=rng)
        self.spatial = nn.Conv2d(2, 1, k=spatial_k, rng=rng)

    def forward(self, rv_feat, vox_feat):
        if rv_feat.shape != vox_feat.shape:
            raise ValueError(
                f"cbam inputs must match: {rv_feat.shape} vs {vox_feat.shape}")
        x = self.fuse(ops.concat([rv_feat, vox_feat], axis=0))
        gate_c = self.channel(x)
        x = x * ops.reshape(gate_c, (gate_c.shape[0], 1, 1))
        amap = ops.tensor_mean(x, axis=0, keepdims=True)
        mmap = ops.amax(x, axis=0, keepdims=True)
        gate_s = ops.sigmoid(self.spatial(ops.concat([amap, mmap], axis=0)))
        return x * gate_s
