"""First-order optimizers over flat parameter vectors (descent on a loss)."""

import numpy as np


class Momentum:
    def __init__(self, lr, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self._vel = None

    def step(self, params, grad):
        if self._vel is None:
            self._vel = np.zeros_like(params)
        self._vel = self.momentum * self._vel + grad
        return params - self.lr * self._vel


class Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr = lr
        self.b1 = b1
        self.b2 = b2
        self.eps = eps
        self._m = None
        self._v = None
        self._t = 0

    def step(self, params, grad):
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m = self.b1 * self._m + (1 - self.b1) * grad
        self._v = self.b2 * self._v + (1 - self.b2) * grad * grad
        m_hat = self._m / (1 - self.b1**self._t)
        v_hat = self._v / (1 - self.b2**self._t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name, lr, momentum=0.9):
    if name == "momentum":
        return Momentum(lr, momentum)
    if name == "sgd":
        return Momentum(lr, 0.0)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")
