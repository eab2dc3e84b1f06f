"""Adam with bias correction over a named parameter set."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class OptimizerError(FloatingPointError):
    pass


def adam_update(param, grad, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update of ``param`` and its moment buffers ``m``, ``v``.

    ``t`` is the 1-based step count used for bias correction.
    """
    if t < 1:
        raise ValueError(f"Adam step count must be >= 1, got {t}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        # validate everything first so a bad gradient leaves all params untouched
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_update(p.data, g, self.m[name], self.v[name], self.t,
                        self.lr, self.beta1, self.beta2, self.eps)
