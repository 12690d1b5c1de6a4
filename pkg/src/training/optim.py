"""Optimizers over a named-array state.

Updates are in place on the state dict; the optimizer keeps its own buffers
keyed by the same names.

    SGD     v <- mu v + (g + wd p);   p <- p - lr v
    Adam    standard bias-corrected moments, wd added to the gradient
"""

from typing import Optional, Sequence

import numpy as np

from src.utils.errors import InvalidArgumentError


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: Optional[float]) -> tuple[dict, float]:
    """Scale every gradient by min(1, max_norm / norm). Returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def step_decay(base_lr: float, step: int, milestones: Sequence[int] = (), gamma: float = 0.1) -> float:
    """lr multiplied by gamma once for every milestone already reached."""
    passed = sum(1 for m in milestones if step >= m)
    return base_lr * gamma ** passed


class SGD:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise InvalidArgumentError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise InvalidArgumentError("weight_decay must be >= 0")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, state: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, param in state.items():
            grad = grads[name]
            if self.weight_decay:
                grad = grad + self.weight_decay * param
            v = self.velocity.get(name)
            v = grad.copy() if v is None else self.momentum * v + grad
            self.velocity[name] = v
            param -= lr * v


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, state: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, param in state.items():
            grad = grads[name]
            if self.weight_decay:
                grad = grad + self.weight_decay * param
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * grad
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * grad * grad
            self.m[name], self.v[name] = m, v
            param -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def build_optimizer(name: str = "sgd", momentum: float = 0.9, weight_decay: float = 0.0):
    if name == "sgd":
        return SGD(momentum, weight_decay)
    if name == "adam":
        return Adam(weight_decay=weight_decay)
    raise InvalidArgumentError(f"unknown optimizer '{name}' (expected sgd or adam)")
