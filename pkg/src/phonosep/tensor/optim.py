"""Adaptive-moment optimiser."""
from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np

from ..errors import NonFiniteError
from .core import Tensor


class Adam:
    """Adam with bias correction.

    ``lr`` is a plain attribute so schedulers can rescale it between steps.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7, lr_scale: Optional[Sequence[float]] = None):
        self.params = list(params)
        # per-parameter multipliers on the shared learning rate
        self.lr_scale = [1.0] * len(self.params) if lr_scale is None else [float(v) for v in lr_scale]
        if len(self.lr_scale) != len(self.params):
            raise ValueError("lr_scale needs one entry per parameter")
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                name = p.name or f"#{i}"
                raise NonFiniteError(f"non-finite gradient for parameter {name}; step rejected")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v, scale in zip(self.params, self.m, self.v, self.lr_scale):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = scale * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def state(self, names: Sequence[str]) -> Dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(names, self.m, self.v):
            out[f"m/{name}"] = m
            out[f"v/{name}"] = v
        return out

    def load_state(self, names: Sequence[str], state: Dict[str, np.ndarray], step_count: int, lr: float) -> None:
        for i, name in enumerate(names):
            self.m[i] = np.array(state[f"m/{name}"], copy=True)
            self.v[i] = np.array(state[f"v/{name}"], copy=True)
        self.step_count = int(step_count)
        self.lr = float(lr)
