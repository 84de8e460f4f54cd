"""Parameter containers shared by the model blocks."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter tree: attributes that are grad-enabled tensors,
    modules, or lists of modules are collected by ``named_parameters``."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def to(self, dtype) -> "Module":
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self


def param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True):
        bound = np.sqrt(6.0 / (n_in + n_out))
        self.weight = param(rng.uniform(-bound, bound, size=(n_in, n_out)), dtype)
        self.bias = param(np.zeros(n_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gamma = param(np.ones(dim), dtype)
        self.beta = param(np.zeros(dim), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Two linear layers with a relu in between."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(n_in, hidden, rng, dtype)
        self.fc2 = Linear(hidden, n_out, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))
