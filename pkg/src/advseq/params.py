"""Named parameter sets and weight initializers shared by the models."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def embedding_init(rng: np.random.Generator, vocab: int, dim: int, dtype) -> np.ndarray:
    return rng.normal(0.0, dim ** -0.5, size=(vocab, dim)).astype(dtype)


class ParamSet:
    """Insertion-ordered mapping of names to trainable tensors.

    ``adopt`` registers an existing tensor under this set without copying, so
    two models can share (and jointly train) one embedding table. Iteration
    order is creation order, which pins down the optimizer update order and
    the checkpoint manifest order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def adopt(self, name: str, tensor: Tensor) -> Tensor:
        """Register an existing tensor (parameter sharing, not a copy)."""
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ContractError(f"adopted parameter {name!r} must require grad")
        self._params[name] = tensor
        return tensor

    def add_linear(self, rng, name: str, fan_in: int, fan_out: int, dtype) -> None:
        self.add(f"{name}.w", glorot(rng, fan_in, fan_out, dtype))
        self.add(f"{name}.b", np.zeros(fan_out, dtype=dtype))

    def add_layer_norm(self, name: str, dim: int, dtype) -> None:
        self.add(f"{name}.gain", np.ones(dim, dtype=dtype))
        self.add(f"{name}.bias", np.zeros(dim, dtype=dtype))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()
