"""Adam optimizer over named parameters."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class Adam:
    """Adam with bias correction.

    Frozen parameters and parameters without an accumulated gradient are
    skipped entirely, which keeps their bytes identical across steps. A
    step with all-zero gradients from the first step onward is a no-op:
    both moment estimates stay at zero, so the update is exactly zero.
    """

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._moments: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.tensor.grad
            if not p.trainable or g is None:
                continue
            key = id(p)
            if key not in self._moments:
                self._moments[key] = (np.zeros_like(p.data), np.zeros_like(p.data))
            m, v = self._moments[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.tensor.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def reset_state(self, params) -> None:
        """Drop moment estimates for parameters whose data was replaced."""
        for p in params:
            self._moments.pop(id(p), None)
