"""Reverse-mode autodiff tensor.

A Tensor wraps a numpy array plus an optional gradient. Ops (see ops.py)
record their inputs and a backward closure on the output tensor; backward()
walks that implicit tape once in reverse topological order. The graph is
consumed by backward: running it twice without redoing the forward pass is
an error.
"""

import numpy as np

_GRAD_ENABLED = True

# sentinel marking a node whose backward closure already ran
_CONSUMED = object()


def is_grad_enabled():
    return _GRAD_ENABLED


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float32)
        if arr.dtype.kind != "f":
            raise TypeError(f"tensor data must be float, got {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- graph construction (used by ops.py) --------------------------------

    @staticmethod
    def _make(data, parents, backward_fn):
        """Result node of an op. Records the closure only while grads are on
        and some parent requires them."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    def _accum(self, g):
        # non-inplace: closures may hand the same array to several parents
        self.grad = g if self.grad is None else self.grad + g

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if not self.requires_grad:
            raise RuntimeError("loss does not require grad; nothing to differentiate")
        if self._parents is _CONSUMED:
            raise RuntimeError("backward already ran for this graph; rerun the forward pass")

        # iterative topological sort (graphs are deep; no recursion)
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._parents is _CONSUMED:
                raise RuntimeError("graph already consumed by a previous backward")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            fn = node._backward
            if fn is not None:
                fn(node.grad)
                node._backward = None
                node._parents = _CONSUMED
        if self._parents == ():
            # leaf used directly as loss: still mark consumed for the contract
            self._parents = _CONSUMED

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        return t

    # -- conveniences ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operators are wired up by ops.py to avoid an import cycle

    def __len__(self):
        return self.data.shape[0]


def parameter(data, dtype=np.float32):
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)
