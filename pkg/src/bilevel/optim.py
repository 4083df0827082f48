"""Outer-loop optimiser: Adam with a step-decayed learning rate."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam on a flat parameter vector.

    The learning rate at update ``t`` (1-based) is
    ``lr * decay ** ((t - 1) // decay_every)``.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, decay=1.0, decay_every=100):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay = decay
        self.decay_every = decay_every
        self.reset()

    def reset(self):
        self.m = None
        self.v = None
        self.t = 0

    def current_lr(self) -> float:
        return self.lr * self.decay ** (max(self.t - 1, 0) // self.decay_every)

    def step(self, params, grad) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.current_lr() * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": None if self.m is None else self.m.tolist(),
                "v": None if self.v is None else self.v.tolist()}
