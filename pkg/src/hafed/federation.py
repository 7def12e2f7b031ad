"""Round orchestration for the unimodal-training / multimodal-prediction protocol.

One round: sample clients, let each train locally from the downloaded
global model (and, for the posterior variants, draw S parameter samples),
aggregate within each modality, align decoders across modalities, then
stitch each modality's own encoder onto the shared decoder.

All randomness is keyed by (master seed, round, client id), and reports are
sorted by client id before aggregation, so results do not depend on the
order or the process in which clients run.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hafed import aggregation as agg
from hafed.client import (ClientState, DivergenceError, compute_delta, local_train,
                          sample_posterior)
from hafed.config import ExperimentConfig
from hafed.data import SynthDataset, generate, mask_modalities, partition, partition_aligned
from hafed.eval import MetricsRecord, evaluate, shrinkage_diagnostic
from hafed.nn.model import HAFedformer, make_aligned_batch, make_seq_batch
from hafed.params import ParamMap

log = logging.getLogger(__name__)

CSV_FIELDS = ["round", "loss", "acc7", "acc2", "f1", "mae", "corr", "shrinkage"]


@dataclass
class RoundLog:
    round: int
    clients: list
    train_loss: float
    metrics: MetricsRecord
    shrinkage: float
    seconds: float = 0.0
    diverged: bool = False
    note: str = ""

    def csv_row(self) -> dict:
        m = self.metrics
        fmt = lambda v: "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))
        return {"round": self.round, "loss": fmt(self.train_loss), "acc7": fmt(m.acc7),
                "acc2": fmt(m.acc2), "f1": fmt(m.f1), "mae": fmt(m.mae), "corr": fmt(m.corr),
                "shrinkage": fmt(self.shrinkage)}


@dataclass
class ExperimentResult:
    logs: list
    params: ParamMap
    diverged: bool = False

    def metric(self, name: str, round_idx: int = -1):
        return getattr(self.logs[round_idx].metrics, name)


def sample_clients(K: int, n: int, seed: int, round_idx: int, pool=None) -> list[int]:
    """Uniform draw of n clients without replacement, keyed by (seed, round); sorted."""
    pool = np.arange(K) if pool is None else np.asarray(sorted(pool))
    if n > len(pool):
        raise ValueError(f"cannot select {n} clients from {len(pool)}")
    rng = np.random.default_rng([seed, round_idx, 101])
    return sorted(int(k) for k in rng.choice(pool, size=n, replace=False))


def stratified_clients(groups: dict, n: int, seed: int, round_idx: int) -> list[int]:
    """At least one client from every group (as evenly as n allows)."""
    rng = np.random.default_rng([seed, round_idx, 202])
    keys = list(groups)
    share = [n // len(keys) + (1 if i < n % len(keys) else 0) for i in range(len(keys))]
    chosen = []
    for key, s in zip(keys, share):
        members = sorted(groups[key])
        chosen += [int(k) for k in rng.choice(members, size=min(max(s, 1), len(members)), replace=False)]
    return sorted(chosen)


def client_seed(master: int, round_idx: int, client_id: int) -> int:
    return int(np.random.SeedSequence([master, round_idx, client_id]).generate_state(1)[0])


@dataclass
class ClientResult:
    client_id: int
    modality: object
    n_data: int
    loss: float
    params: ParamMap | None = None
    stats: object = None
    delta: object = None


def run_client(model, global_params: ParamMap, state: ClientState, encoder_policy: str,
               epochs: int, var_floor: float) -> ClientResult:
    anchor = global_params if state.mu_prox > 0 else None
    params, loss = local_train(model, global_params, state, epochs, anchor)
    res = ClientResult(state.client_id, state.modality, state.n_data, loss)
    if encoder_policy == "fedavg":
        res.params = params
    else:
        res.stats = sample_posterior(model, params, state, anchor)
        if encoder_policy == "pbea":
            res.delta = compute_delta(global_params, res.stats, var_floor)
    return res


def _run_client_task(args):
    return run_client(*args)


def aggregate_modality(global_params: ParamMap, results: list[ClientResult],
                       policy: agg.AggregationPolicy) -> tuple[ParamMap, float | None]:
    """Within-modality aggregate; returns (params, server step used or None)."""
    results = sorted(results, key=lambda r: r.client_id)
    if policy.encoder == "fedavg":
        return agg.fedavg_aggregate([r.params for r in results], [r.n_data for r in results]), None
    stats = [r.stats for r in results]
    if policy.encoder == "pbea_simplified":
        return agg.simplified_aggregate(stats), None
    step = policy.server_step or agg.default_server_step(stats, policy.var_floor)
    return agg.pbea_server_update(global_params, [r.delta for r in results], step), step


def combine_modalities(global_params: ParamMap, aggregates: dict, modalities,
                       policy: agg.AggregationPolicy) -> tuple[ParamMap, list]:
    """Cross-modal decoder step plus encoder-decoder concatenation."""
    order = [m for m in modalities if m in aggregates]
    dec_keys = global_params.keys_where("decoder")
    decoders = [aggregates[m].params.select(dec_keys) for m in order]
    coeffs = []
    if len(decoders) == 1:
        decoder = decoders[0]
    elif policy.decoder == "cmda":
        decoder, coeffs = agg.cmda_aggregate(decoders, policy.cmda_lr, policy.cmda_p,
                                             return_coefficients=True)
    else:
        decoder = agg.plain_average(decoders)
    return agg.concatenate_global(aggregates, decoder, modalities, template=global_params), coeffs


class Federation:
    """Holds the data, partition and cross-round server state of one experiment."""

    def __init__(self, config: ExperimentConfig, dataset: SynthDataset | None = None, workers: int = 1):
        self.config = config
        self.arch = config.arch
        self.model = HAFedformer(config.arch, config.loss)
        self.dataset = dataset if dataset is not None else generate(config.data, config.dataset_seed)
        self.policy = agg.AggregationPolicy.for_variant(
            config.variant, server_step=config.server_step, cmda_lr=config.cmda_lr,
            cmda_p=config.cmda_p, var_floor=config.var_floor)
        self.workers = workers
        self._pool = None
        self.last_aggregates: dict = {}
        self.active = config.active_modalities
        self._build_clients()
        self._build_eval()

    def _build_clients(self):
        cfg, train = self.config, self.dataset.train
        self.client_data: dict = {}
        self.client_modality: dict = {}
        if cfg.setting == "utmp":
            plan = partition(train, cfg.n_clients, self.arch.modalities, cfg.alpha, cfg.dataset_seed)
            for k, (m, idx) in plan.clients.items():
                if m not in self.active:
                    continue
                self.client_data[k] = make_seq_batch([train[i].unimodal(m) for i in idx], m, self.arch.dim(m))
                self.client_modality[k] = m
        else:
            kept = [s.without(cfg.drop_modalities) if cfg.drop_modalities else s for s in train]
            for k, idx in enumerate(partition_aligned(kept, cfg.n_clients, cfg.alpha, cfg.dataset_seed)):
                self.client_data[k] = make_aligned_batch([kept[i] for i in idx], self.arch)
                self.client_modality[k] = "all"

    def _build_eval(self):
        cfg = self.config
        val = self.dataset.val[: cfg.eval_size]
        if cfg.drop_modalities:
            val = [s.without(cfg.drop_modalities) for s in val]
        self.probe = val[: cfg.probe_size]
        self.val = mask_modalities(val, cfg.missing_rate, cfg.seed) if cfg.missing_rate > 0 else val

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _map(self, tasks):
        if self.workers <= 1 or len(tasks) <= 1:
            return [_run_client_task(t) for t in tasks]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(max_workers=self.workers)
        return list(self._pool.map(_run_client_task, tasks))

    def select(self, round_idx: int) -> list[int]:
        cfg = self.config
        pool = sorted(self.client_data)
        n = min(cfg.clients_per_round, len(pool))
        if cfg.setting == "utmp" and 1 < len(self.active) and round_idx <= len(self.active):
            groups = {m: [k for k in pool if self.client_modality[k] == m] for m in self.active}
            return stratified_clients(groups, n, cfg.seed, round_idx)
        return sample_clients(cfg.n_clients, n, cfg.seed, round_idx, pool=pool)

    def client_state(self, k: int, round_idx: int) -> ClientState:
        cfg = self.config
        return ClientState(k, self.client_modality[k], self.client_data[k], lr=cfg.lr, steps=cfg.steps,
                           samples=cfg.samples, mu_prox=cfg.mu_prox,
                           seed=client_seed(cfg.seed, round_idx, k), batch_size=cfg.batch_size,
                           shard_fraction=cfg.shard_fraction)

    def run_round(self, global_params: ParamMap, round_idx: int) -> tuple[ParamMap, RoundLog]:
        t0 = time.perf_counter()
        cfg = self.config
        selected = self.select(round_idx)
        encoder_policy = "fedavg" if cfg.setting == "vanilla_multimodal" else self.policy.encoder
        tasks = [(self.model, global_params, self.client_state(k, round_idx), encoder_policy,
                  cfg.local_epochs, cfg.var_floor) for k in selected]
        results = sorted(self._map(tasks), key=lambda r: r.client_id)
        losses = [r.loss for r in results if not np.isnan(r.loss)]
        train_loss = float(np.mean(losses)) if losses else float("nan")
        if cfg.setting == "vanilla_multimodal":
            new = agg.fedavg_aggregate([r.params for r in results], [r.n_data for r in results])
        else:
            new = self._aggregate_utmp(global_params, results)
        metrics, _ = evaluate(self.model, new, self.val)
        shrink = shrinkage_diagnostic(self.model, new, self.probe)
        return new, RoundLog(round_idx, selected, train_loss, metrics, shrink,
                             time.perf_counter() - t0)

    def _aggregate_utmp(self, global_params, results):
        aggregates = {}
        for m in self.active:
            group = [r for r in results if r.modality == m]
            if group:
                params, _ = aggregate_modality(global_params, group, self.policy)
                aggregates[m] = agg.ModalityAggregate(m, params, [r.client_id for r in group])
                self.last_aggregates[m] = aggregates[m]
            elif m in self.last_aggregates:
                aggregates[m] = self.last_aggregates[m]
            else:
                aggregates[m] = agg.ModalityAggregate(m, global_params, [])
        new, _ = combine_modalities(global_params, aggregates, self.active, self.policy)
        return new

    def initial_log(self, params: ParamMap) -> RoundLog:
        metrics, _ = evaluate(self.model, params, self.val)
        return RoundLog(0, [], float("nan"), metrics, shrinkage_diagnostic(self.model, params, self.probe))


class RoundWriter:
    """Appends RoundLogs to rounds.csv (deterministic) and timings.csv (wall clock)."""

    def __init__(self, out_dir: str | Path):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.rounds = self.dir / "rounds.csv"
        self.timings = self.dir / "timings.csv"
        self._parts = [self.dir / "rounds.csv.part", self.dir / "timings.csv.part"]
        for p, header in zip(self._parts, (CSV_FIELDS, ["round", "seconds", "diverged"])):
            with p.open("w", newline="") as f:
                csv.writer(f).writerow(header)

    def write(self, rec: RoundLog):
        with self._parts[0].open("a", newline="") as f:
            csv.DictWriter(f, CSV_FIELDS).writerow(rec.csv_row())
        with self._parts[1].open("a", newline="") as f:
            csv.writer(f).writerow([rec.round, f"{rec.seconds:.3f}", int(rec.diverged)])

    def finish(self):
        self._parts[0].replace(self.rounds)
        self._parts[1].replace(self.timings)


def run_experiment(config: ExperimentConfig, dataset: SynthDataset | None = None,
                   out_dir: str | Path | None = None, workers: int = 1,
                   init: ParamMap | None = None) -> ExperimentResult:
    """R rounds from a seeded initialisation; logs round 0 (initial model) then 1..R."""
    writer = RoundWriter(out_dir) if out_dir is not None else None
    with Federation(config, dataset, workers) as fed:
        params = init if init is not None else fed.model.init_params(config.seed)
        logs = [fed.initial_log(params)]
        if writer:
            writer.write(logs[0])
        diverged = False
        for r in range(1, config.rounds + 1):
            try:
                params, rec = fed.run_round(params, r)
            except (DivergenceError, FloatingPointError) as exc:
                log.warning("round %d diverged: %s", r, exc)
                rec = RoundLog(r, [], float("nan"), logs[-1].metrics, float("nan"),
                               diverged=True, note=str(exc))
                diverged = True
            logs.append(rec)
            if writer:
                writer.write(rec)
            if diverged:
                break
            log.info("round %d  loss=%.4f  mae=%.4f  shrink=%.4f", r, rec.train_loss,
                     rec.metrics.mae, rec.shrinkage)
    if writer:
        writer.finish()
    return ExperimentResult(logs, params, diverged)
