"""AdamW over dictionaries of float64 arrays."""

from __future__ import annotations

from typing import Mapping

import numpy as np


class AdamW:
    """Adam with decoupled weight decay.

    State is kept per parameter name; :meth:`step` returns new arrays and never
    mutates its inputs, so parameter snapshots stay immutable.
    """

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p = p * (1.0 - self.lr * self.weight_decay)
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}
