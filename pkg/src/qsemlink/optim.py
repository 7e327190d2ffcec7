"""Adaptive-moment gradient descent for training and calibration."""

from __future__ import annotations

import numpy as np

__all__ = ["Adam"]


class Adam:
    """Adam with bias correction; supports per-group learning rates.

    ``params`` is either a list of tensors (single group) or a list of
    (tensors, lr) group tuples, as used by the block calibrator where the
    rounding offsets and the log-scales learn at different rates.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if params and isinstance(params[0], tuple):
            self.groups = [(list(ps), float(glr)) for ps, glr in params]
        else:
            self.groups = [(list(params), float(lr))]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for tensors, lr in self.groups:
            for p in tensors:
                if p.grad is None:
                    continue
                g = p.grad
                key = id(p)
                m = self._m.get(key)
                v = self._v.get(key)
                if m is None:
                    m = np.zeros_like(p.data)
                    v = np.zeros_like(p.data)
                m = b1 * m + (1.0 - b1) * g
                v = b2 * v + (1.0 - b2) * (g * g)
                self._m[key] = m
                self._v[key] = v
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.copy_(p.data - np.float32(lr) * update)

    def zero_grad(self) -> None:
        for tensors, _ in self.groups:
            for p in tensors:
                p.grad = None
