"""Adam optimizer over autodiff leaf tensors."""

from __future__ import annotations

import numpy as np

from . import counters
from .tensor import Tensor


class Adam:
    """Standard Adam with bias correction.

    Updates reassign `param.data` rather than mutating it in place, so
    any recorded graph that referenced the old values stays intact.
    """

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        params = list(params)
        for p in params:
            if not p.requires_grad:
                raise ValueError("Adam got a frozen tensor; only trainables belong here")
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * (g * g)
            m_hat = self._m[i] / bias1
            v_hat = self._v[i] / bias2
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
        counters.count_grad_step()
