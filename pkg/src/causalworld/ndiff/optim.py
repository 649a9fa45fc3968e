"""Adaptive-moment stochastic gradient optimizer.

Moments live in one flat buffer per optimizer so a step costs a handful of
vector ops instead of per-parameter bookkeeping.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """Raised when a step is rejected because a gradient is NaN/Inf."""


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * g.dtype.type(scale) for k, g in grads.items()}


class Adam:
    """First/second-moment parameter update with bias correction.

    Gradients are clipped by global norm before each step; a non-finite
    gradient rejects the whole step.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = 10.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self._layout: list[tuple[str, int, int, tuple]] = []
        offset = 0
        for name, p in params.items():
            size = int(p.data.size)
            self._layout.append((name, offset, size, p.data.shape))
            offset += size
        self._total = offset
        self.m = np.zeros(offset, dtype=np.float32)
        self.v = np.zeros(offset, dtype=np.float32)
        self._flat = np.empty(offset, dtype=np.float32)

    def _flatten(self, grads: dict[str, Tensor | np.ndarray]) -> np.ndarray:
        missing = [name for name, *_ in self._layout if name not in grads]
        if missing:
            raise KeyError(f"gradients missing for parameters: {missing[:4]}")
        flat = self._flat
        for name, off, size, _ in self._layout:
            g = grads[name]
            data = g.data if isinstance(g, Tensor) else np.asarray(g)
            flat[off : off + size] = data.reshape(-1)
        return flat

    def step(self, grads: dict[str, Tensor | np.ndarray]) -> None:
        g = self._flatten(grads)
        if not np.all(np.isfinite(g)):
            for name, off, size, _ in self._layout:
                if not np.all(np.isfinite(g[off : off + size])):
                    raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        if self.clip_norm is not None:
            norm = float(np.sqrt(np.sum(g.astype(np.float64) ** 2)))
            if norm > self.clip_norm and norm > 0.0:
                g *= np.float32(self.clip_norm / norm)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * (g * g)
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        update = (self.m / bc1) / (np.sqrt(self.v / bc2) + self.eps)
        update *= self.lr
        for name, off, size, shape in self._layout:
            self.params[name].data -= update[off : off + size].reshape(shape)
