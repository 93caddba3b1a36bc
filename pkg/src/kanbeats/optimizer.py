"""Adam over a named parameter dict, updated in place in a fixed order."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """One bias-corrected Adam update of every array in ``params``.

        Arrays missing from ``grads`` are treated as frozen and left alone.
        """
        names = [name for name in params if name in grads]
        for name in names:
            g = grads[name]
            if g.shape != params[name].shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")

        scale = 1.0
        if self.clip_norm:
            norm = np.sqrt(sum(float(np.sum(grads[n] * grads[n])) for n in names))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in names:
            g = grads[name] * scale if scale != 1.0 else grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if not np.all(np.isfinite(params[name])):
                raise NumericError(f"parameter {name!r} became non-finite after step {self.t}")
