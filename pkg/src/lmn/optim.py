"""Adagrad-style per-coordinate updates.

One implementation of the row update is shared by the dense parameter
path, the sparse embedding path, and the sharded value store, so every
path applies bit-identical arithmetic.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .numerics import Tensor


class Adagrad:
    """acc += g^2; w -= lr * g / (sqrt(acc) + eps)."""

    def __init__(self, lr: float = 0.01, eps: float = 1e-10):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.eps = eps
        self._acc: dict[str, np.ndarray] = {}

    @staticmethod
    def apply_rows(values: np.ndarray, acc: np.ndarray, rows: np.ndarray,
                   grads: np.ndarray, lr: float, eps: float) -> None:
        """Update selected rows of a table in place; ``rows`` must be
        unique (duplicates must be pre-aggregated by the caller)."""
        g = grads
        acc[rows] += g * g
        values[rows] -= lr * g / (np.sqrt(acc[rows]) + eps)

    def acc_for(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in self._acc:
            self._acc[name] = np.zeros(shape)
        return self._acc[name]

    def step_dense(self, name: str, t: Tensor) -> None:
        if t.grad is None:
            return
        acc = self.acc_for(name, t.value.shape)
        acc += t.grad * t.grad
        t.value -= self.lr * t.grad / (np.sqrt(acc) + self.eps)

    def step_rows(self, name: str, t: Tensor, rows: np.ndarray) -> None:
        """Sparse row update of a (N, d) table from its dense grad buffer."""
        if t.grad is None or rows.size == 0:
            return
        acc = self.acc_for(name, t.value.shape)
        self.apply_rows(t.value, acc, rows, t.grad[rows], self.lr, self.eps)
