"""Parameter containers shared by the model blocks.

Features are laid out channel-first (``C x n``), so a linear layer maps
``W @ X + b`` with ``W`` of shape ``out x in`` and ``b`` of shape ``out x 1``.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True, std: float | None = None):
        self.weight = param(rng, (n_out, n_in), std if std is not None else 1.0 / np.sqrt(n_in))
        self.bias = zeros((n_out, 1)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(self.weight, x)
        return y if self.bias is None else T.add(y, self.bias)
