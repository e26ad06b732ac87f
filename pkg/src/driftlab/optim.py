"""Adam over a flat parameter vector, with scope-limited state resets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Adam:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    # per-coordinate step counts so a partial reset restarts bias correction
    # only where the moments were cleared
    t: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)
        self.t = np.zeros(self.size, dtype=np.int64)

    def step(self, params: np.ndarray, grad: np.ndarray, mask: np.ndarray | None = None) -> None:
        """In-place descent step; coordinates outside ``mask`` are left alone."""
        if mask is None:
            mask = slice(None)
        g = grad[mask]
        self.t[mask] += 1
        t = self.t[mask]
        self.m[mask] = self.beta1 * self.m[mask] + (1 - self.beta1) * g
        self.v[mask] = self.beta2 * self.v[mask] + (1 - self.beta2) * g * g
        m_hat = self.m[mask] / (1 - self.beta1**t)
        v_hat = self.v[mask] / (1 - self.beta2**t)
        params[mask] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset_state(self, mask: np.ndarray | None = None) -> None:
        if mask is None:
            mask = slice(None)
        self.m[mask] = 0.0
        self.v[mask] = 0.0
        self.t[mask] = 0


def clip_grad_norm(grad: np.ndarray, max_norm: float | None) -> float:
    """Rescale ``grad`` in place to at most ``max_norm``; returns the raw norm."""
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm is not None and norm > max_norm:
        grad *= max_norm / (norm + 1e-12)
    return norm
