"""Adam optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OptimizerError
from .tensor import Tensor


@dataclass
class AdamConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Per-parameter first/second moment tracking with bias correction.

    Weight decay is decoupled: applied directly to the weights before the
    moment update instead of being folded into the gradient.
    """

    def __init__(self, params: dict[str, Tensor], config: AdamConfig | None = None):
        self.params = params
        self.config = config or AdamConfig()
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        cfg = self.config
        self.step_count += 1
        bc1 = 1.0 - cfg.beta1 ** self.step_count
        bc2 = 1.0 - cfg.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise OptimizerError(f"parameter {name!r} has no gradient")
            g = p.grad
            if cfg.weight_decay:
                p.data -= cfg.lr * cfg.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
