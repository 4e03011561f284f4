"""Adam with linear learning-rate warmup and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class WarmupSchedule:
    """Linear ramp from ``warmup_init_lr`` to ``lr`` over ``warmup_steps``, then flat.

    Step numbers start at 1; the first update uses ``warmup_init_lr``.
    """

    lr: float = 1e-3
    warmup_steps: int = 2000
    warmup_init_lr: float = 1e-7

    def __call__(self, step: int) -> float:
        if self.warmup_steps <= 0 or step > self.warmup_steps:
            return self.lr
        frac = (step - 1) / self.warmup_steps
        return self.warmup_init_lr + (self.lr - self.warmup_init_lr) * frac


@dataclass
class Adam:
    params: list[Tensor]
    schedule: WarmupSchedule = field(default_factory=WarmupSchedule)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-7
    step_count: int = 0

    def __post_init__(self):
        self.params = list(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def current_lr(self) -> float:
        return self.schedule(self.step_count + 1)

    def step(self) -> float:
        """Apply one update from the populated grads, then clear them.

        Parameters whose grad is None were not reached by the loss and are left
        untouched. Returns the learning rate used.
        """
        if all(p.grad is None for p in self.params):
            raise RuntimeError("adam step with no populated gradients; call backward() first")
        self.step_count += 1
        t = self.step_count
        lr = self.schedule(t)
        b1, b2 = self.betas
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)
            p.grad = None
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
