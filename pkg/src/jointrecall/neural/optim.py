"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidConfigError, TrainingDivergenceError


@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise InvalidConfigError("bad AdamW hyperparameters")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        """Update ``params`` in place. Missing gradients count as zero."""
        for name, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"non-finite gradient for {name}")
        scale = 1.0
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name in sorted(params):
            w = params[name]
            g = grads.get(name)
            g = np.zeros_like(w) if g is None else g * scale
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            if self.weight_decay:
                w *= 1.0 - lr * self.weight_decay
            w -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
