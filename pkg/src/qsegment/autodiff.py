"""Minimal reverse-mode differentiation over the NCHW kernels.

Each op evaluates its kernel eagerly and appends a closure to the tape; the
tape is already in topological order, so ``backward`` just walks it in
reverse.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T


class Var:
    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str | None = None):
        self.value = value
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Var({self.name or ''}, shape={self.value.shape})"


class Tape:
    def __init__(self):
        self._ops = []
        self.params: dict[str, Var] = {}
        self._done = False

    def param(self, name: str, value: np.ndarray) -> Var:
        v = self.params.get(name)
        if v is None:
            v = self.params[name] = Var(value, name)
        return v

    def _record(self, out: Var, fn) -> Var:
        self._ops.append((out, fn))
        return out

    # ops -------------------------------------------------------------------

    def conv2d(self, x: Var, w: Var, b: Var | None, stride=1, padding=0, groups=1) -> Var:
        params = T.ConvParams(w.value, None if b is None else b.value, stride, padding, groups)
        out = Var(T.conv2d(x.value, params))

        def back(g):
            dx, dw, db = T.conv2d_backward(x.value, params, g)
            x._accumulate(dx)
            w._accumulate(dw)
            if b is not None:
                b._accumulate(db)

        return self._record(out, back)

    def batchnorm(self, x: Var, gamma: Var, beta: Var, bn: T.BatchNormParams) -> Var:
        # the kernel reads gamma/beta from bn; keep them in sync with the Vars
        bn = T.BatchNormParams(gamma.value, beta.value, bn.running_mean, bn.running_var, bn.eps, bn.momentum, bn.mode)
        out = Var(T.batchnorm(x.value, bn))

        def back(g):
            dx, dgamma, dbeta = T.batchnorm_backward(x.value, bn, g)
            x._accumulate(dx)
            gamma._accumulate(dgamma)
            beta._accumulate(dbeta)

        return self._record(out, back)

    def relu(self, x: Var) -> Var:
        out = Var(T.relu(x.value))

        def back(g):
            x._accumulate(g * (x.value > 0))

        return self._record(out, back)

    def add(self, a: Var, b: Var) -> Var:
        out = Var(T.add(a.value, b.value))

        def back(g):
            a._accumulate(g)
            b._accumulate(g)

        return self._record(out, back)

    def maxpool2x2(self, x: Var):
        pooled, idx = T.maxpool2x2(x.value)
        out = Var(pooled)
        hw = x.shape[2:]

        def back(g):
            x._accumulate(T.max_unpool2x2(g, idx, hw))

        return self._record(out, back), idx

    def max_unpool2x2(self, x: Var, idx: np.ndarray, out_hw) -> Var:
        out = Var(T.max_unpool2x2(x.value, idx, out_hw))

        def back(g):
            x._accumulate(T.gather_indices(g, idx))

        return self._record(out, back)

    # -----------------------------------------------------------------------

    def backward(self, out: Var, grad: np.ndarray) -> dict[str, np.ndarray]:
        """Propagate ``grad`` (d loss / d out) and return parameter gradients."""
        if self._done:
            raise RuntimeError("tape already consumed; run a new forward pass")
        if not self._ops:
            raise RuntimeError("backward called without a recorded forward trace")
        self._done = True
        out._accumulate(grad)
        for node, fn in reversed(self._ops):
            if node.grad is not None:
                fn(node.grad)
        return {
            name: (v.grad if v.grad is not None else np.zeros_like(v.value))
            for name, v in self.params.items()
        }
