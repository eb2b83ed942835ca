"""Small module system: parameter registration, layers, containers.

Modules register parameters, buffers, and submodules in insertion order so
that traversal (and therefore checkpoint layout and optimizer state) is
deterministic. Weight init draws from an explicitly passed numpy Generator.
"""

import numpy as np

from . import ops
from .tensor import Tensor


class Module:

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        arr = np.asarray(value)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def cast(self, dtype):
        """Cast all parameters and float buffers to dtype, in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name, b in m._buffers.items():
                if b.dtype.kind == "f" and b.dtype != np.dtype(dtype):
                    nb = b.astype(dtype)
                    m._buffers[name] = nb
                    object.__setattr__(m, name, nb)
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class Sequential(Module):

    def __init__(self, *mods):
        super().__init__()
        self._seq = []
        for i, m in enumerate(mods):
            setattr(self, str(i), m)
            self._seq.append(m)

    def forward(self, x):
        for m in self._seq:
            x = m(x)
        return x

    def __iter__(self):
        return iter(self._seq)

    def __len__(self):
        return len(self._seq)


class ModuleList(Module):

    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _uniform(rng, shape, bound, dtype=np.float32):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


class Linear(Module):

    def __init__(self, cin, cout, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(cin)
        self.weight = _uniform(rng, (cin, cout), bound)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """3D-tensor conv: input [Ci,H,W]. Padding defaults to same (k//2).

    1x1 stride-1 convs are routed through matmul instead of the patch
    kernels; the weight keeps its canonical [Co,Ci,kh,kw] layout either way.
    """

    def __init__(self, cin, cout, k=3, stride=1, padding=None, bias=True,
                 bias_fill=0.0, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        self.padding = (k // 2, k // 2) if padding is None else (
            (padding, padding) if isinstance(padding, int) else tuple(padding))
        bound = 1.0 / np.sqrt(cin * k * k)
        self.weight = _uniform(rng, (cout, cin, k, k), bound)
        self.bias = Tensor(np.full(cout, bias_fill, dtype=np.float32),
                           requires_grad=True) if bias else None
        self._mm = (k == 1 and self.stride == (1, 1) and self.padding == (0, 0))

    def forward(self, x):
        if self._mm:
            co, ci = self.weight.shape[:2]
            h, w = x.shape[1], x.shape[2]
            w2 = ops.reshape(self.weight, (co, ci))
            y = ops.matmul(w2, ops.reshape(x, (ci, h * w)))
            if self.bias is not None:
                y = y + ops.reshape(self.bias, (co, 1))
            return ops.reshape(y, (co, h, w))
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(Module):
    """Input [Ci,D,H,W]; stride/padding may be per-axis triples."""

    def __init__(self, cin, cout, k=3, stride=1, padding=None, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        kt = (k, k, k) if isinstance(k, int) else tuple(k)
        self.stride = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
        self.padding = tuple(kk // 2 for kk in kt) if padding is None else (
            (padding,) * 3 if isinstance(padding, int) else tuple(padding))
        bound = 1.0 / np.sqrt(cin * kt[0] * kt[1] * kt[2])
        self.weight = _uniform(rng, (cout, cin) + kt, bound)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    """Per-channel kxk conv, stride 1, same padding."""

    def __init__(self, c, k=3, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(k * k)
        self.weight = _uniform(rng, (c, k, k), bound)
        self.bias = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return ops.depthwise_conv2d(x, self.weight, self.bias)


class BatchNorm(Module):
    """Normalizes over every axis except `axis` (the channel axis)."""

    def __init__(self, c, axis=0, momentum=0.1, eps=1e-5):
        super().__init__()
        self.axis = axis
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, dtype=np.float32))
        self.register_buffer("running_var", np.ones(c, dtype=np.float32))

    def forward(self, x):
        return ops.batch_norm(x, self.gamma, self.beta,
                              self.running_mean, self.running_var,
                              self.training, axis=self.axis,
                              momentum=self.momentum, eps=self.eps)


class LayerNorm(Module):
    """Normalizes each row of an [n, d] batch over the feature axis.

    Unlike BatchNorm this is independent of the other rows, so it behaves
    identically for single-row batches and needs no running statistics.
    """

    def __init__(self, d, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        mu = ops.tensor_mean(x, axis=1, keepdims=True)
        xc = x - mu
        var = ops.tensor_mean(xc * xc, axis=1, keepdims=True)
        # 1/sqrt via exp/log; var + eps > 0 always
        inv = ops.exp(-0.5 * ops.log(var + self.eps))
        return (xc * inv) * self.gamma + self.beta


class ReLU(Module):

    def forward(self, x):
        return ops.relu(x)
