from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ctcd.errors import ConfigError, NumericError
from ctcd.numcore import DenseArray


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    poly_decay: bool = True
    power: float = 2.0
    end_lr: float = 1e-5
    stage1_lr: float | None = 3e-3

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("optim.lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.stage1_lr is not None and self.stage1_lr <= 0:
            raise ConfigError("optim.stage1_lr must be > 0")
        if self.eps <= 0 or self.power <= 0 or self.end_lr < 0:
            raise ConfigError("optim.eps and optim.power must be > 0, optim.end_lr >= 0")


class Adam:
    """Adam over a fixed parameter list.

    With ``poly_decay`` the step size follows
    ``(lr - end_lr) * (1 - step / total_steps) ** power + end_lr``.
    """

    def __init__(self, params: list[DenseArray], cfg: AdamConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total_steps = max(1, total_steps)
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def learning_rate(self) -> float:
        c = self.cfg
        if not c.poly_decay:
            return c.lr
        frac = min(self.t, self.total_steps) / self.total_steps
        return (c.lr - c.end_lr) * (1.0 - frac) ** c.power + c.end_lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        c = self.cfg
        lr = self.learning_rate()
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient reached the optimizer")
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
