"""First-order optimizers operating in place on :class:`~infnet.autodiff.Tensor` parameters."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import NumericError, Tensor


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self, grads):
        if grads is None:
            grads = [p.grad for p in self.params]
        out = []
        for p, g in zip(self.params, grads):
            if g is not None and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {p.name or 'unnamed parameter'}; step aborted")
            out.append(g)
        return out

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> None:
        raise NotImplementedError


class Adam(Optimizer):
    """Bias-corrected Adam; ``grads`` defaults to each parameter's ``.grad``."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        grads = self._grads(grads)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGDMomentum(Optimizer):
    """Heavy-ball SGD: ``v <- mu*v - lr*g``; ``p <- p + v``."""

    def __init__(self, params, lr=0.01, momentum=0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        grads = self._grads(grads)
        for p, g, v in zip(self.params, grads, self.velocity):
            if g is None:
                continue
            v *= self.momentum
            v -= self.lr * g
            p.data += v


def make_optimizer(kind: str, params, lr: float, momentum: float = 0.9) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind in ("sgd", "sgd-momentum"):
        return SGDMomentum(params, lr=lr, momentum=momentum)
    raise ValueError(f"unknown optimizer kind {kind!r}")
