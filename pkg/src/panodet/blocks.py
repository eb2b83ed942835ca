"""Shared 2D building blocks."""

import numpy as np

from .autograd import nn


class ConvBlock2d(nn.Module):
    """3x3 conv + batch norm + ReLU."""

    def __init__(self, cin, cout, stride=1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        # no conv bias: the batch norm absorbs any constant shift
        self.conv = nn.Conv2d(cin, cout, k=3, stride=stride, bias=False, rng=rng)
        self.bn = nn.BatchNorm(cout)
        self.relu = nn.ReLU()

    def forward(self, x):
        return self.relu(self.bn(self.conv(x)))
