"""Regression/sentiment metrics, significance testing and model diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from itertools import combinations

import numpy as np
from scipy.stats import norm
from sklearn.metrics import f1_score

from hafed.data import mask_modalities
from hafed.nn.model import HAFedformer, make_aligned_batch


@dataclass
class MetricsRecord:
    acc7: float
    acc2: float | None
    f1: float | None
    mae: float
    corr: float | None
    n: int

    def as_row(self) -> dict:
        return asdict(self)


def compute_metrics(predictions, labels, exclude_zero: bool = True,
                    out_range=(-3.0, 3.0)) -> MetricsRecord:
    """Acc7 on rounded clamped values, Acc2/F1 on sign (zero labels excluded), MAE, Pearson r.

    Acc2 and F1 come back ``None`` when no labels survive the zero filter;
    Corr is ``None`` when either side has zero variance.
    """
    yhat = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if yhat.shape != y.shape or y.size == 0:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    lo, hi = out_range
    acc7 = float(np.mean(np.round(np.clip(yhat, lo, hi)) == np.round(np.clip(y, lo, hi))))
    keep = y != 0 if exclude_zero else np.ones_like(y, dtype=bool)
    if keep.any():
        pos_true = y[keep] > 0
        pos_pred = yhat[keep] > 0
        acc2 = float(np.mean(pos_true == pos_pred))
        f1 = float(f1_score(pos_true, pos_pred, average="weighted", labels=[False, True], zero_division=0))
    else:
        acc2 = f1 = None
    mae = float(np.mean(np.abs(yhat - y)))
    if np.std(yhat) == 0 or np.std(y) == 0:
        corr = None
    else:
        corr = float(np.clip(np.corrcoef(yhat, y)[0, 1], -1.0, 1.0))
    return MetricsRecord(acc7, acc2, f1, mae, corr, int(y.size))


# --- Wilcoxon signed-rank --------------------------------------------------------

EXACT_MAX_N = 20


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if np.all(d == 0):
        raise ValueError("all differences zero")
    d = d[d != 0]
    absd = np.abs(d)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(len(d))
    sorted_abs = absd[order]
    i = 0
    while i < len(d):
        j = i
        while j + 1 < len(d) and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return d, ranks


def _exact_upper_tail(ranks: np.ndarray, w_plus: float) -> float:
    """P(W+ >= w_plus) under random signs, by dynamic programming on doubled ranks."""
    r2 = np.rint(2 * ranks).astype(int)
    counts = np.zeros(r2.sum() + 1)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    target = int(np.rint(2 * w_plus))
    return float(counts[target:].sum() / 2.0 ** len(r2))


def wilcoxon_signed_rank(a, b, alternative: str = "greater", min_pairs: int = 6) -> float:
    """One-tailed paired signed-rank test; ``greater`` tests whether a tends to exceed b.

    Zero differences are dropped and ties get average ranks. Exact null
    distribution up to 20 non-zero pairs, normal approximation with
    continuity and tie correction beyond.
    """
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    if len(a) < min_pairs:
        raise ValueError(f"need at least {min_pairs} pairs, got {len(a)}")
    if alternative not in ("greater", "less"):
        raise ValueError("alternative must be 'greater' or 'less'")
    d, ranks = _signed_ranks(a, b)
    if alternative == "less":
        d = -d
    w_plus = float(ranks[d > 0].sum())
    n = len(d)
    if n <= EXACT_MAX_N:
        return _exact_upper_tail(ranks, w_plus)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return float(norm.sf(z))


# --- model evaluation ---------------------------------------------------------------

def evaluate(model: HAFedformer, params, samples, batch_size: int = 256) -> tuple[MetricsRecord, np.ndarray]:
    preds = []
    for i in range(0, len(samples), batch_size):
        preds.append(model.predict(params, make_aligned_batch(samples[i:i + batch_size], model.arch)))
    pred = np.concatenate(preds)
    lo, hi = model.arch.out_min, model.arch.out_max
    return compute_metrics(pred, [s.y for s in samples], out_range=(lo, hi)), pred


def shrinkage_diagnostic(model: HAFedformer, params, probe) -> float:
    """Mean pairwise distance between per-modality embedding centroids.

    Each modality's probe sequences go through that modality's own encoder;
    embeddings are mean-pooled over real timesteps, then over the probe set.
    """
    arch = model.arch
    batch = make_aligned_batch(probe, arch)
    centroids = []
    for m in arch.modalities:
        lm = batch.lengths[m]
        keep = lm > 0
        if not keep.any():
            continue
        e = model.encode(params, m, batch.xs[m][keep], lm[keep])
        mask = (np.arange(e.shape[1])[None, :] < lm[keep][:, None]).astype(np.float64)
        pooled = (e * mask[..., None]).sum(axis=1) / lm[keep][:, None]
        centroids.append(pooled.mean(axis=0))
    if len(centroids) < 2:
        return 0.0
    dists = [np.linalg.norm(a - b) for a, b in combinations(centroids, 2)]
    return float(np.mean(dists))


def missing_rate_sweep(model: HAFedformer, params, test_set, rates, seeds) -> list[dict]:
    """Long-format rows (rate, seed, metrics...) for each missing rate and seed."""
    rows = []
    for rate in rates:
        for seed in seeds:
            masked = mask_modalities(test_set, rate, seed)
            rec, _ = evaluate(model, params, masked)
            rows.append({"missing_rate": rate, "seed": seed, **rec.as_row()})
    return rows


def summarize_sweep(rows: list[dict], metric: str = "mae") -> list[dict]:
    """Per rate: mean and (population) variance of ``metric`` across seeds."""
    out = []
    for rate in sorted({r["missing_rate"] for r in rows}):
        vals = np.array([r[metric] for r in rows if r["missing_rate"] == rate], dtype=np.float64)
        out.append({"missing_rate": rate, "metric": metric, "mean": float(vals.mean()),
                    "var": float(vals.var()), "n_seeds": int(vals.size)})
    return out
