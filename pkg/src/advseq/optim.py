"""Adaptive-moment optimizer with inverse-square-root warmup."""

from __future__ import annotations

import numpy as np

from . import _kernels as K
from .autodiff import Tensor
from .errors import ContractError


def inv_sqrt_lr(step: int, model_dim: int, lr_scale: float, warmup: int) -> float:
    """lr_scale * dim^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ContractError("learning-rate schedule starts at step 1")
    return lr_scale * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Adam over an ordered list of tensors, deduplicated by identity.

    Shared tensors (the embedding tables registered under both a translation
    model and a language model) are updated exactly once per step. Moment
    buffers live in the tensor's own dtype so the fused kernel applies.
    """

    def __init__(self, tensors, model_dim: int, lr_scale: float = 1.0,
                 warmup: int = 4000, betas=(0.9, 0.98), eps: float = 1e-9):
        seen: dict[int, Tensor] = {}
        for t in tensors:
            seen.setdefault(id(t), t)
        self.tensors: list[Tensor] = list(seen.values())
        self.model_dim = model_dim
        self.lr_scale = lr_scale
        self.warmup = warmup
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros(t.size, dtype=t.dtype) for t in self.tensors]
        self._v = [np.zeros(t.size, dtype=t.dtype) for t in self.tensors]

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.zero_grad()

    def step(self) -> float:
        """Apply one update from the accumulated grads; returns the lr used."""
        self.step_count += 1
        lr = inv_sqrt_lr(self.step_count, self.model_dim, self.lr_scale, self.warmup)
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for t, m, v in zip(self.tensors, self._m, self._v):
            if t.grad is None:
                continue
            K.adam_step(t.data.reshape(-1), np.ascontiguousarray(t.grad.reshape(-1)),
                        m, v, lr, self.beta1, self.beta2, self.eps, b1c, b2c)
        return lr

    # ------------------------------------------------------------------
    # Checkpoint support: moments exposed as named arrays, aligned with the
    # tensor order fixed at construction.
    # ------------------------------------------------------------------

    def moment_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (m, v) in enumerate(zip(self._m, self._v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_moment_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for i in range(len(self.tensors)):
            for kind, store in (("m", self._m), ("v", self._v)):
                key = f"adam.{kind}.{i}"
                if key not in arrays:
                    raise ContractError(f"missing optimizer moment {key}")
                if arrays[key].shape != store[i].shape:
                    raise ContractError(f"optimizer moment {key} has wrong shape")
                store[i][:] = arrays[key]
        self.step_count = step_count
