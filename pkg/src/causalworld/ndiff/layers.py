"""Network building blocks: linear maps, embeddings, GRU cell, MLP."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor, concat, matmul, relu, sigmoid, tanh


class Module:
    """Minimal parameter container; children are discovered by attribute walk."""

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}" if not prefix else f"{prefix}/{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_params(key))
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Tensor) and v.requires_grad:
                        out[f"{key}/{k}"] = v
                    elif isinstance(v, Module):
                        out.update(v.named_params(f"{key}/{k}"))
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Tensor) and v.requires_grad:
                        out[f"{key}/{i}"] = v
                    elif isinstance(v, Module):
                        out.update(v.named_params(f"{key}/{i}"))
        return out


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    """Weight init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.W = uniform_fan_in(rng, n_in, (n_in, n_out))
        self.b = zeros_param((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.W) + self.b


class Embedding(Module):
    """Learned class-embedding table for categorical / boolean inputs."""

    def __init__(self, n_classes: int, dim: int, rng: np.random.Generator):
        self.table = uniform_fan_in(rng, 1, (n_classes, dim))

    def __call__(self, idx: np.ndarray) -> Tensor:
        from .tensor import gather_rows

        return gather_rows(self.table, idx)


class GruCell(Module):
    """Standard gated recurrent unit cell.

    With all-zero parameters the update gate is 0.5 and the candidate is 0,
    so one step maps ``h`` to ``0.5 * h``.
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_hidden = n_hidden
        self.W_z = uniform_fan_in(rng, n_in, (n_in, n_hidden))
        self.U_z = uniform_fan_in(rng, n_hidden, (n_hidden, n_hidden))
        self.b_z = zeros_param((n_hidden,))
        self.W_r = uniform_fan_in(rng, n_in, (n_in, n_hidden))
        self.U_r = uniform_fan_in(rng, n_hidden, (n_hidden, n_hidden))
        self.b_r = zeros_param((n_hidden,))
        self.W_h = uniform_fan_in(rng, n_in, (n_in, n_hidden))
        self.U_h = uniform_fan_in(rng, n_hidden, (n_hidden, n_hidden))
        self.b_h = zeros_param((n_hidden,))

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        z = sigmoid(matmul(x, self.W_z) + matmul(h, self.U_z) + self.b_z)
        r = sigmoid(matmul(x, self.W_r) + matmul(h, self.U_r) + self.b_r)
        n = tanh(matmul(x, self.W_h) + matmul(r * h, self.U_h) + self.b_h)
        return (1.0 - z) * n + z * h

    def run(self, xs: Sequence[Tensor], batch: int) -> Tensor:
        """Fold a sequence of inputs; an empty sequence returns the zero state."""
        h = Tensor(np.zeros((batch, self.n_hidden)))
        for x in xs:
            h = self.step(x, h)
        return h


class Mlp(Module):
    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, activation: str = "relu"):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        act = relu if self.activation == "relu" else tanh
        for layer in self.layers[:-1]:
            x = act(layer(x))
        return self.layers[-1](x)
