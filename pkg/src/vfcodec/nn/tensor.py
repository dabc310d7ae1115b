"""Reverse-mode autodiff tensor.

A Tensor wraps a numpy array and, when it participates in a differentiable
graph, remembers its parents plus a closure that maps the output gradient to
parent gradients. All reductions inside ops run in a fixed serial order, so
repeated forward passes on identical inputs are bit-identical within one
process.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import NumericsError

_FINITE_CHECKS = True
_GRAD_ENABLED = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf guard on op outputs; returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (decode paths, evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if _FINITE_CHECKS:
            # a float64-accumulated sum is non-finite iff some element is
            total = float(arr.sum(dtype=np.float64))
            if total != total or total in (float("inf"), float("-inf")):
                raise NumericsError("tensor holds non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Accumulate gradients into every reachable tensor with requires_grad.

        `seed` defaults to 1.0 and is only optional for scalar outputs.
        """
        if seed is None:
            if self.data.ndim != 0:
                raise NumericsError("backward() without seed needs a scalar output")
            seed = np.ones((), dtype=self.data.dtype)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
        order = _topo_order(self)
        grads = {id(self): seed}
        for node in order:
            out_grad = grads.pop(id(node), None)
            if out_grad is None:
                continue
            if node.requires_grad and node._backward_fn is None:
                # leaf parameter/input
                node.grad = out_grad if node.grad is None else node.grad + out_grad
                continue
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(out_grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pgrad
                else:
                    grads[key] = pgrad

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward_fn is not None


def _topo_order(root: Tensor):
    """Reverse topological order, iterative (graphs can be ~10^3 nodes deep)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def make_result(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op output; parents/backward dropped when grad is off or unused."""
    out = Tensor(data)
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad or p._backward_fn is not None:
                out._parents = tuple(parents)
                out._backward_fn = backward_fn
                break
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)
