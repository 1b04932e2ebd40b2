"""Parameter containers built on :mod:`retrofpn.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, matmul, add, relu, sigmoid


class Module:
    """Minimal parameter tree; attributes that are Tensors or Modules are walked by name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}/")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}_{i}/")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in checkpoint")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
            p.data = value.copy()


def he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(he_normal(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class MLP(Module):
    """Two linear layers with a ReLU in between.

    ``out_act`` is applied after the second layer: ``None``, ``"relu"`` or ``"sigmoid"``.
    """

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator, out_act: str | None = None):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng)
        if out_act not in (None, "relu", "sigmoid"):
            raise ValueError(f"unknown output activation {out_act!r}")
        self.out_act = out_act

    def __call__(self, x: Tensor) -> Tensor:
        y = self.fc2(relu(self.fc1(x)))
        if self.out_act == "relu":
            return relu(y)
        if self.out_act == "sigmoid":
            return sigmoid(y)
        return y
