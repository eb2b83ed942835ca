"""Optimizers. State is keyed by parameter name so checkpoints can restore
it exactly; all updates are elementwise and deterministic."""

import numpy as np


class Optimizer:

    def __init__(self, named_params, lr):
        self.params = [(n, p) for n, p in named_params]
        if not self.params:
            raise ValueError("optimizer got no parameters")
        self.lr = lr
        self.t = 0

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        raise NotImplementedError

    def state_items(self):
        """Deterministically ordered (key, array) pairs for checkpointing."""
        return []

    def load_state_items(self, items):
        table = dict(items)
        for key, _ in self.state_items():
            if key not in table:
                raise KeyError(f"optimizer state missing {key}")
        for key, arr in self.state_items():
            np.copyto(arr, table[key].reshape(arr.shape))


class SGD(Optimizer):

    def __init__(self, named_params, lr, momentum=0.0, weight_decay=0.0):
        super().__init__(named_params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = {}
        if momentum != 0.0:
            for n, p in self.params:
                self._buf[n] = np.zeros_like(p.data)

    def step(self):
        self.t += 1
        for n, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * p.data
            if self.momentum != 0.0:
                buf = self._buf[n]
                buf *= self.momentum
                buf += g
                g = buf
            p.data = p.data - self.lr * g

    def state_items(self):
        return [(n + ".mom", self._buf[n]) for n, _ in self.params
                if n in self._buf]


class Adam(Optimizer):

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        super().__init__(named_params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = {n: np.zeros_like(p.data) for n, p in self.params}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * p.data
            m, v = self._m[n], self._v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_items(self):
        out = []
        for n, _ in self.params:
            out.append((n + ".m", self._m[n]))
            out.append((n + ".v", self._v[n]))
        return out
