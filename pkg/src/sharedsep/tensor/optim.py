from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import InvalidInputError
from .core import Tensor


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _check_grads(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                name = p.name or f"#{i}"
                raise InvalidInputError(f"parameter {name} has no gradient; run backward first")

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"step_count": np.array(self.step_count, dtype=np.int64)}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.step_count = int(arrays["step_count"])


class SGD(Optimizer):
    """Plain gradient descent; used to check update arithmetic in tests."""

    def step(self):
        self._check_grads()
        for p in self.params:
            p.data -= (self.lr * p.grad).astype(p.dtype)
        self.step_count += 1


class Adam(Optimizer):
    """ADAM with bias-corrected first and second moment estimates."""

    def __init__(self, params, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self._check_grads()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_arrays(self):
        out = super().state_arrays()
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"m.{i}"]
            self.v[i][...] = arrays[f"v.{i}"]
