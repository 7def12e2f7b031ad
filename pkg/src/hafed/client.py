"""Local unimodal training and layer-wise posterior sampling on a client.

A client runs plain (optionally proximal) minibatch SGD. For the posterior
estimate it branches S short SGD runs from the same starting parameters,
each on a random half of its data, and summarises the S end points per
layer by their mean and diagonal variance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from hafed.params import ParamMap, check_compatible


class Model(Protocol):
    def loss_and_grad(self, params: ParamMap, batch) -> tuple[float, ParamMap]: ...


@dataclass
class ClientState:
    client_id: int
    modality: Any
    data: Any  # supports len() and take(indices)
    lr: float = 0.05
    steps: int = 5
    samples: int = 5
    mu_prox: float = 0.0
    seed: int = 0
    batch_size: int = 32
    shard_fraction: float = 0.5

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("sample times S must be >= 1")
        if self.steps < 0:
            raise ValueError("update steps T must be >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.mu_prox < 0:
            raise ValueError("proximal coefficient must be >= 0")
        if len(self.data) == 0:
            raise ValueError(f"client {self.client_id} has an empty dataset")

    @property
    def n_data(self) -> int:
        return len(self.data)


@dataclass
class SampleStats:
    mean: ParamMap
    var: ParamMap
    n_samples: int
    client_id: int = -1
    modality: Any = None
    n_data: int = 0


@dataclass
class DeltaReport:
    delta: ParamMap
    client_id: int = -1
    modality: Any = None
    n_data: int = 0


class DivergenceError(FloatingPointError):
    pass


def client_opt_step(model: Model, params: ParamMap, batch, state: ClientState,
                    anchor: ParamMap | None = None) -> tuple[ParamMap, float]:
    """One SGD step on ``loss(batch) + mu_prox/2 * ||params - anchor||^2``.

    Returns the updated parameters and the data loss before the step.
    """
    loss, grads = model.loss_and_grad(params, batch)
    prox = state.mu_prox > 0 and anchor is not None
    lr, mu = state.lr, state.mu_prox
    out = {}
    for k, v in params.items():
        g = grads[k]
        if prox:
            g = g + mu * (v - anchor[k])
        new = v - lr * g
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"client {state.client_id}: non-finite update in {k}")
        out[k] = new
    return ParamMap(out, params.tags), loss


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def local_train(model: Model, params: ParamMap, state: ClientState, epochs: int,
                anchor: ParamMap | None = None) -> tuple[ParamMap, float]:
    """Shuffled minibatch epochs; returns (params, mean minibatch loss or nan if no steps)."""
    rng = np.random.default_rng([state.seed, 0])
    losses = []
    for _ in range(epochs):
        for idx in _minibatches(state.n_data, state.batch_size, rng):
            params, loss = client_opt_step(model, params, state.data.take(idx), state, anchor)
            losses.append(loss)
    return params, (float(np.mean(losses)) if losses else float("nan"))


def _run_sample(model, start, state, s, anchor):
    rng = np.random.default_rng([state.seed, 1, s])
    n = state.n_data
    shard_size = max(1, int(np.ceil(state.shard_fraction * n)))
    shard = np.sort(rng.choice(n, size=shard_size, replace=False))
    theta = start
    stream = iter(())
    for _ in range(state.steps):
        idx = next(stream, None)
        if idx is None:
            stream = _minibatches(shard_size, state.batch_size, rng)
            idx = next(stream)
        theta, _ = client_opt_step(model, theta, state.data.take(shard[idx]), state, anchor)
    return theta


def collect_samples(model: Model, start: ParamMap, state: ClientState,
                    anchor: ParamMap | None = None, order=None) -> list[ParamMap]:
    """The S parameter samples; ``order`` permutes which sample index is drawn first."""
    order = range(state.samples) if order is None else order
    return [_run_sample(model, start, state, s, anchor) for s in order]


def summarize(samples: list[ParamMap], state: ClientState | None = None) -> SampleStats:
    stacked = {k: np.stack([p[k] for p in samples]) for k in samples[0].keys()}
    tags = samples[0].tags
    mean = ParamMap({k: v.mean(axis=0) for k, v in stacked.items()}, dict(tags))
    var = ParamMap({k: v.var(axis=0) for k, v in stacked.items()}, dict(tags))
    if state is None:
        return SampleStats(mean, var, len(samples))
    return SampleStats(mean, var, len(samples), state.client_id, state.modality, state.n_data)


def sample_posterior(model: Model, start: ParamMap, state: ClientState,
                     anchor: ParamMap | None = None) -> SampleStats:
    """S branches of T SGD steps from ``start``, each on its own random half-shard."""
    return summarize(collect_samples(model, start, state, anchor), state)


def compute_delta(global_params: ParamMap, stats: SampleStats, var_floor: float = 1e-4) -> DeltaReport:
    """Per-coordinate precision times (downloaded global - local posterior mean)."""
    if not var_floor > 0:
        raise ValueError("variance floor must be positive")
    check_compatible(global_params, stats.mean)
    delta = {k: (v - stats.mean[k]) / (stats.var[k] + var_floor) for k, v in global_params.items()}
    return DeltaReport(ParamMap(delta, dict(global_params.tags)), stats.client_id,
                       stats.modality, stats.n_data)
