"""Hierarchical server aggregation.

Within a modality: posterior-based encoder aggregation (a descent step on
the precision-weighted quadratic whose minimiser is the product-of-Gaussians
mean), its mean-only simplification, or FedAvg. Across modalities:
pairwise cross-modal decoder pulls, or a plain average. The global model
keeps each modality's own encoder from that modality's aggregate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Any

import numpy as np

from hafed.client import DeltaReport, SampleStats
from hafed.params import ParamMap, check_compatible

ENCODER_POLICIES = ("pbea", "pbea_simplified", "fedavg")
DECODER_POLICIES = ("cmda", "plain_average")

# name -> (encoder policy, decoder policy)
VARIANTS = {
    "ha_fedformer": ("fedavg", "plain_average"),
    "ha_fedformer_plus": ("fedavg", "cmda"),
    "ha_fedformer_pp_s": ("pbea_simplified", "cmda"),
    "ha_fedformer_pp": ("pbea", "cmda"),
}


@dataclass
class AggregationPolicy:
    encoder: str = "pbea"
    decoder: str = "cmda"
    server_step: float | None = None  # None: derived from reported precisions
    cmda_lr: float = 0.5
    cmda_p: float = 2.0
    var_floor: float = 1e-4

    def __post_init__(self):
        if self.encoder not in ENCODER_POLICIES:
            raise ValueError(f"unknown encoder policy {self.encoder!r}")
        if self.decoder not in DECODER_POLICIES:
            raise ValueError(f"unknown decoder policy {self.decoder!r}")
        if self.server_step is not None and not self.server_step > 0:
            raise ValueError("server step must be positive")
        if not self.cmda_lr > 0 or self.cmda_p < 1 or not self.var_floor > 0:
            raise ValueError("cmda_lr > 0, cmda_p >= 1 and var_floor > 0 required")

    @classmethod
    def for_variant(cls, name: str, **kw) -> "AggregationPolicy":
        enc, dec = VARIANTS[name]
        return cls(encoder=enc, decoder=dec, **kw)


@dataclass
class ModalityAggregate:
    modality: Any
    params: ParamMap
    client_ids: list = field(default_factory=list)


def _check_same_modality(items):
    mods = {r.modality for r in items}
    if len(mods) > 1:
        raise ValueError(f"reports mix modalities {sorted(map(str, mods))}")


# --- within-modality -----------------------------------------------------------

def pbea_server_update(global_params: ParamMap, reports: list[DeltaReport], step: float) -> ParamMap:
    """theta' = theta - step * mean_k(delta_k), layer by layer."""
    if not reports:
        raise ValueError("no reports to aggregate")
    _check_same_modality(reports)
    for r in reports:
        check_compatible(global_params, r.delta)
    K = len(reports)
    out = {}
    for k, v in global_params.items():
        g = reports[0].delta[k].copy()
        for r in reports[1:]:
            g += r.delta[k]
        out[k] = v - step * (g / K)
    return ParamMap(out, dict(global_params.tags))


def default_server_step(stats: list[SampleStats], var_floor: float,
                        lo: float = 1e-3, hi: float = 1.0) -> float:
    """Step that keeps every coordinate's quadratic descent non-oscillating.

    ``0.5 / mean precision`` clamped to ``[lo, hi]``, then capped at
    ``1 / max client-averaged precision`` so no coordinate overshoots its
    precision-weighted mean.
    """
    avg = None
    for s in stats:
        p = 1.0 / (s.var.flat() + var_floor)
        avg = p if avg is None else avg + p
    avg = avg / len(stats)
    step = float(np.clip(0.5 / avg.mean(), lo, hi))
    return min(step, 1.0 / float(avg.max()))


def pbea_fixed_point(stats: list[SampleStats], var_floor: float = 1e-4) -> ParamMap:
    """Closed-form precision-weighted mean (sum P_k)^-1 (sum P_k mu_k), per coordinate."""
    if not stats:
        raise ValueError("no statistics to combine")
    ref = stats[0].mean
    out = {}
    for k in ref.keys():
        num = np.zeros_like(ref[k])
        den = np.zeros_like(ref[k])
        for s in stats:
            p = 1.0 / (s.var[k] + var_floor)
            num += p * s.mean[k]
            den += p
        out[k] = num / den
    return ParamMap(out, dict(ref.tags))


def fedavg_aggregate(params_list: list[ParamMap], weights=None) -> ParamMap:
    """sum_k alpha_k theta_k with alpha normalised from ``weights`` (default equal)."""
    if not params_list:
        raise ValueError("nothing to aggregate")
    w = np.ones(len(params_list)) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total == 0:
        raise ValueError("aggregation weights sum to zero")
    alpha = w / total
    ref = params_list[0]
    for p in params_list[1:]:
        check_compatible(ref, p)
    # averaging offsets from the first input keeps identical inputs an exact fixed point
    out = {}
    for k in ref.keys():
        base = ref[k]
        acc = np.zeros_like(base)
        for a, p in zip(alpha[1:], params_list[1:]):
            acc = acc + a * (p[k] - base)
        out[k] = base + acc
    return ParamMap(out, dict(ref.tags))


def simplified_aggregate(stats: list[SampleStats]) -> ParamMap:
    """Dataset-size-weighted average of the clients' sample means."""
    if not stats:
        raise ValueError("no statistics to combine")
    sizes = [s.n_data for s in stats]
    if sum(sizes) == 0:
        raise ValueError("total dataset size is zero")
    return fedavg_aggregate([s.mean for s in stats], sizes)


# --- cross-modality -------------------------------------------------------------

def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def cmda_coefficients(query: ParamMap, key: ParamMap, p: float = 2.0) -> np.ndarray:
    """Softmax over layers of the per-layer p-norm distance between two decoders."""
    check_compatible(query, key)
    gamma = [np.linalg.norm((query[k] - key[k]).ravel(), ord=p) for k in query.keys()]
    return _softmax(gamma)


def cmda_pair_update(query: ParamMap, key: ParamMap, psi: np.ndarray, lr: float) -> ParamMap:
    """Each layer of the query pulled toward the key by ``lr * psi[layer]``."""
    check_compatible(query, key)
    if len(psi) != len(query):
        raise ValueError("one coefficient per layer required")
    out = {k: q - lr * c * (q - key[k]) for (k, q), c in zip(query.items(), psi)}
    return ParamMap(out, dict(query.tags))


def cmda_aggregate(decoders: list[ParamMap], lr: float = 0.5, p: float = 2.0,
                   return_coefficients: bool = False):
    """Mean over all unordered modality pairs of the pulled query decoder.

    In each pair the lower-index modality is the query and the other the key.
    """
    if len(decoders) < 2:
        raise ValueError("cross-modal aggregation needs at least two decoders")
    results, coeffs = [], []
    for a, b in combinations(range(len(decoders)), 2):
        psi = cmda_coefficients(decoders[a], decoders[b], p)
        results.append(cmda_pair_update(decoders[a], decoders[b], psi, lr))
        coeffs.append(psi)
    out = fedavg_aggregate(results)
    return (out, coeffs) if return_coefficients else out


def plain_average(decoders: list[ParamMap]) -> ParamMap:
    return fedavg_aggregate(decoders)


def concatenate_global(aggregates: dict, global_decoder: ParamMap, modalities,
                       template: ParamMap | None = None) -> ParamMap:
    """Stem and stack of modality m come from aggregate m; the decoder is shared.

    Modalities absent from ``aggregates`` keep their encoder from ``template``.
    """
    missing = [m for m in modalities if m not in aggregates]
    if missing and template is None:
        raise ValueError(f"missing aggregates for modalities {missing}")
    ref = template if template is not None else next(iter(aggregates.values())).params
    out = {}
    for k, tag in ref.tags.items():
        kind, m = tag
        if kind == "decoder":
            out[k] = global_decoder[k].copy()
        else:
            src = aggregates[m].params if m in aggregates else template
            out[k] = src[k].copy()
    return ParamMap(out, dict(ref.tags))
