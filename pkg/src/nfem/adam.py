"""Adam optimizer with bias correction, operating on parameter leaves."""

from __future__ import annotations

import numpy as np

from .autodiff import TensorNode


class NonFiniteGradient(FloatingPointError):
    """A parameter gradient contained NaN or Inf; the step was aborted."""


def adam_step(values: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, scratch: np.ndarray | None = None) -> None:
    """One bias-corrected Adam update, in place on (values, m, v).

    t is the 1-based step count shared by all parameters of one optimizer.
    ``scratch`` (same shape as values) avoids temporary allocations in the
    hot loop.
    """
    if t < 1:
        raise ValueError("step count t must be >= 1")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    tmp = scratch if scratch is not None else np.empty_like(values)
    m *= beta1
    np.multiply(grad, 1.0 - beta1, out=tmp)
    m += tmp
    v *= beta2
    np.multiply(grad, grad, out=tmp)
    tmp *= 1.0 - beta2
    v += tmp
    # values -= lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected moments
    np.multiply(v, 1.0 / (1.0 - beta2**t), out=tmp)
    np.sqrt(tmp, out=tmp)
    tmp += eps
    np.divide(m, tmp, out=tmp)
    tmp *= lr / (1.0 - beta1**t)
    values -= tmp


class Parameter:
    """Trainable leaf tensor with its Adam moment arrays."""

    def __init__(self, name: str, values: np.ndarray, trainable: bool = True):
        self.name = name
        self.node = TensorNode(np.asarray(values, dtype=np.float64))
        self.trainable = trainable
        self.m = np.zeros_like(self.node.values)
        self.v = np.zeros_like(self.node.values)
        self._scratch = np.empty_like(self.node.values)

    @property
    def values(self) -> np.ndarray:
        return self.node.values

    @values.setter
    def values(self, arr: np.ndarray) -> None:
        self.node.values[...] = arr

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.node.values.shape})"


class Adam:
    """Adam over a list of :class:`Parameter`; defaults follow common practice."""

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p in self.params:
            grad = p.node.grad
            if grad is None:
                grad = np.zeros_like(p.node.values)
            try:
                adam_step(p.node.values, grad, p.m, p.v, self.t,
                          self.lr, self.beta1, self.beta2, self.eps,
                          scratch=p._scratch)
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(f"{p.name}: {exc}") from None

    def zero_grad(self) -> None:
        for p in self.params:
            p.node.grad = None
