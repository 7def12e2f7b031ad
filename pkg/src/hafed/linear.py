"""Least-squares linear model with the same interface as the transformer model.

Used where closed-form answers exist: the posterior mean of a client is
``(X^T X)^{-1} X^T y`` and its precision is ``X^T X``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hafed.params import ParamMap


@dataclass
class ArrayBatch:
    X: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "ArrayBatch":
        idx = np.asarray(idx)
        return ArrayBatch(self.X[idx], self.y[idx])


class LinearRegressor:
    loss_kind = "squared"

    def __init__(self, dim: int):
        self.dim = dim

    def init_params(self, seed: int = 0, value: float = 0.0) -> ParamMap:
        return ParamMap({"w": np.full(self.dim, float(value))}, {"w": ("stack", "lin")})

    def predict(self, params: ParamMap, batch: ArrayBatch) -> np.ndarray:
        return batch.X @ params["w"]

    def loss(self, params: ParamMap, batch: ArrayBatch) -> float:
        r = self.predict(params, batch) - batch.y
        return float(np.mean(r * r))

    def loss_and_grad(self, params: ParamMap, batch: ArrayBatch):
        r = self.predict(params, batch) - batch.y
        grad = 2.0 / len(r) * (batch.X.T @ r)
        return float(np.mean(r * r)), ParamMap({"w": grad}, dict(params.tags))


def least_squares(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.solve(X.T @ X, X.T @ y)
