"""Synthetic aligned multimodal data, non-IID unimodal partitioning and CSV I/O.

Each sample carries one label y in [-3, 3]. Modality m observes
``x_m[t] = A_m u(y, t) + noise / snr_m`` where ``u`` stacks y-scaled
sinusoids (plus a constant y channel) and ``A_m`` is a fixed random
projection. Noise is independent across modalities, so pooling modalities
is strictly more informative than any single one. Sequence lengths are
drawn per modality per sample, so modalities are unaligned in time.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from hafed.samples import AlignedSample

N_BINS = 7
BIN_CENTERS = np.arange(-3, 4)
DEFAULT_LABEL_PROBS = (0.06, 0.12, 0.18, 0.28, 0.18, 0.12, 0.06)


@dataclass
class SynthSpec:
    n_samples: int = 3000
    modalities: tuple = ("L", "A", "V")
    input_dims: tuple = (8, 5, 6)
    t_min: int = 4
    t_max: int = 8
    snr: tuple = (1.0, 0.5, 0.7)
    projection_seeds: tuple | None = None
    label_probs: tuple = DEFAULT_LABEL_PROBS
    frequencies: tuple = (0.7,)
    split: tuple = (0.70, 0.15, 0.15)

    def __post_init__(self):
        for name in ("modalities", "input_dims", "snr", "label_probs", "frequencies", "split"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.projection_seeds is not None:
            self.projection_seeds = tuple(self.projection_seeds)
        self.validate()

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        M = len(self.modalities)
        if len(self.input_dims) != M or len(self.snr) != M:
            raise ValueError("input_dims and snr need one entry per modality")
        if min(self.snr) <= 0:
            raise ValueError("snr must be positive")
        if len(self.label_probs) != N_BINS or min(self.label_probs) < 0 or sum(self.label_probs) <= 0:
            raise ValueError("label_probs must be 7 non-negative weights")
        if self.projection_seeds is not None and len(self.projection_seeds) != M:
            raise ValueError("projection_seeds needs one entry per modality")
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError("need 1 <= t_min <= t_max")

    @property
    def latent_dim(self) -> int:
        return 1 + 2 * len(self.frequencies)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthDataset:
    train: list
    val: list
    test: list
    spec: SynthSpec | None = None
    seed: int | None = None

    def splits(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


def projection(spec: SynthSpec, m_index: int, seed: int) -> np.ndarray:
    pseed = (spec.projection_seeds[m_index] if spec.projection_seeds is not None
             else [seed, 7919, m_index])
    rng = np.random.default_rng(pseed)
    return rng.normal(size=(spec.input_dims[m_index], spec.latent_dim)) / np.sqrt(spec.latent_dim)


def draw_labels(probs, n: int, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    bins = rng.choice(BIN_CENTERS, size=n, p=p / p.sum())
    return np.clip(bins + rng.uniform(-0.5, 0.5, size=n), -3.0, 3.0)


def latent(y: float, T: int, freqs, phase: float) -> np.ndarray:
    t = np.arange(T, dtype=np.float64)[:, None]
    w = np.asarray(freqs, dtype=np.float64)[None, :]
    cols = [np.ones((T, 1)), np.sin(w * t + phase), np.cos(w * t + phase)]
    return y * np.concatenate(cols, axis=1)


def generate(spec: SynthSpec, seed: int) -> SynthDataset:
    rng = np.random.default_rng(seed)
    A = [projection(spec, i, seed) for i in range(len(spec.modalities))]
    ys = draw_labels(spec.label_probs, spec.n_samples, rng)
    samples = []
    for i, y in enumerate(ys):
        xs = {}
        for j, m in enumerate(spec.modalities):
            T = int(rng.integers(spec.t_min, spec.t_max + 1))
            u = latent(y, T, spec.frequencies, rng.uniform(0, 2 * np.pi))
            noise = rng.normal(size=(T, spec.input_dims[j])) / spec.snr[j]
            xs[m] = u @ A[j].T + noise
        samples.append(AlignedSample(xs, float(y), i))
    n_train = int(round(spec.split[0] * spec.n_samples))
    n_val = int(round(spec.split[1] * spec.n_samples))
    return SynthDataset(samples[:n_train], samples[n_train:n_train + n_val],
                        samples[n_train + n_val:], spec, seed)


def pooled_features(samples, modalities) -> np.ndarray:
    """Time-averaged features of the chosen modalities, concatenated."""
    return np.array([np.concatenate([s.xs[m].mean(axis=0) for m in modalities]) for s in samples])


def label_bin(y) -> np.ndarray:
    return (np.round(np.clip(np.asarray(y, dtype=np.float64), -3, 3)) + 3).astype(int)


def label_histogram(ys) -> np.ndarray:
    counts = np.bincount(label_bin(ys), minlength=N_BINS).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


# --- partitioning -----------------------------------------------------------

@dataclass
class PartitionPlan:
    clients: dict  # client id -> (modality, sorted index array)
    alpha: float

    def modality_of(self, k):
        return self.clients[k][0]

    def clients_of(self, m) -> list:
        return [k for k, (mm, _) in self.clients.items() if mm == m]


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(int)
    short = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def partition_indices(ys, n_clients: int, alpha: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Equal-size shards whose label-bin mix follows Dirichlet(alpha * global mix)."""
    n = len(ys)
    if n < n_clients:
        raise ValueError(f"{n} samples cannot fill {n_clients} clients")
    if not alpha > 0:
        raise ValueError("Dirichlet coefficient must be positive")
    bins = label_bin(ys)
    pools = [list(rng.permutation(np.flatnonzero(bins == b))) for b in range(N_BINS)]
    present = np.array([len(p) > 0 for p in pools])
    glob = np.array([len(p) for p in pools], dtype=np.float64) / n
    quotas = np.full(n_clients, n // n_clients)
    quotas[: n % n_clients] += 1
    shards = []
    for k in range(n_clients):
        q = np.zeros(N_BINS)
        q[present] = rng.dirichlet(np.maximum(alpha * glob[present], 1e-3))
        want = _largest_remainder(q, int(quotas[k]))
        take = np.zeros(N_BINS, dtype=int)
        for b in range(N_BINS):
            take[b] = min(want[b], len(pools[b]))
        deficit = int(quotas[k] - take.sum())
        while deficit > 0:
            avail = np.array([len(pools[b]) - take[b] for b in range(N_BINS)])
            b = int(np.argmax(avail))
            step = min(deficit, int(avail[b]))
            take[b] += step
            deficit -= step
        idx = []
        for b in range(N_BINS):
            idx += pools[b][:take[b]]
            pools[b] = pools[b][take[b]:]
        shards.append(np.sort(np.array(idx, dtype=np.int64)))
    return shards


def partition(samples, K: int, modalities, alpha: float, seed: int) -> PartitionPlan:
    """K clients split evenly (contiguous blocks) across modalities, non-IID within each."""
    M = len(modalities)
    if K % M:
        raise ValueError(f"K={K} is not divisible by the number of modalities {M}")
    per = K // M
    rng = np.random.default_rng([seed, 31337])
    clients = {}
    for j, m in enumerate(modalities):
        have = [i for i, s in enumerate(samples) if m in s.xs]
        ys = np.array([samples[i].y for i in have])
        for c, shard in enumerate(partition_indices(ys, per, alpha, rng)):
            clients[j * per + c] = (m, np.array(have, dtype=np.int64)[shard])
    return PartitionPlan(clients, alpha)


def partition_aligned(samples, K: int, alpha: float, seed: int) -> list[np.ndarray]:
    """Sample-level shards for clients that hold every modality."""
    rng = np.random.default_rng([seed, 31337])
    return partition_indices(np.array([s.y for s in samples]), K, alpha, rng)


# --- missing modalities ---------------------------------------------------------

def mask_modalities(samples, rate: float, seed: int) -> list:
    """Drop each present modality with probability ``rate``; redraw masks that drop everything."""
    if not 0 <= rate < 1:
        raise ValueError("missing rate must lie in [0, 1)")
    if rate == 0:
        return list(samples)
    rng = np.random.default_rng([seed, 2718])
    out = []
    for s in samples:
        mods = list(s.xs)
        while True:
            drop = rng.random(len(mods)) < rate
            if not drop.all():
                break
        out.append(s.without([m for m, d in zip(mods, drop) if d]))
    return out


def expected_missing_fraction(rate: float, n_modalities: int) -> float:
    """Marginal missing rate per modality after rejecting all-missing masks."""
    return (rate - rate ** n_modalities) / (1 - rate ** n_modalities)


# --- hashing, CSV --------------------------------------------------------------------

def content_hash(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.int64(s.sample_id).tobytes())
        h.update(np.float64(s.y).tobytes())
        for m in sorted(s.xs):
            h.update(str(m).encode())
            h.update(np.ascontiguousarray(s.xs[m], dtype="<f8").tobytes())
    return h.hexdigest()


def dataset_hash(ds: SynthDataset) -> str:
    h = hashlib.sha256()
    for name, part in ds.splits().items():
        h.update(name.encode())
        h.update(content_hash(part).encode())
    return h.hexdigest()


class SchemaError(ValueError):
    pass


def export_csv(ds: SynthDataset, out_dir: str | Path, modalities) -> dict:
    """One features file per modality (id, t, f0..) plus labels.csv (id, y, split)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    rows = [(s, name) for name, part in ds.splits().items() for s in part]
    for m in modalities:
        p = out / f"features_{m}.csv"
        tmp = p.with_name(p.name + ".tmp")
        with tmp.open("w", newline="") as f:
            w = csv.writer(f)
            d = next(s.xs[m].shape[1] for s, _ in rows if m in s.xs)
            w.writerow(["id", "t"] + [f"f{i}" for i in range(d)])
            for s, _ in rows:
                if m in s.xs:
                    for t, row in enumerate(s.xs[m]):
                        w.writerow([s.sample_id, t] + [repr(float(v)) for v in row])
        tmp.replace(p)
        paths[m] = p
    lp = out / "labels.csv"
    tmp = lp.with_name(lp.name + ".tmp")
    with tmp.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "y", "split"])
        for s, name in rows:
            w.writerow([s.sample_id, repr(float(s.y)), name])
    tmp.replace(lp)
    paths["labels"] = lp
    return paths


def ingest_csv(paths: dict, labels_path, dims: dict) -> dict:
    """Join per-modality feature CSVs with a labels CSV.

    Returns ``{split: [AlignedSample, ...]}``; labels without a split column
    land in ``"all"``. Rows are ordered by ``t`` within each sample.
    """
    labels, split_of = {}, {}
    with Path(labels_path).open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        has_split = "split" in header
        for line, row in enumerate(reader, start=2):
            sid = int(row[0])
            if sid in labels:
                raise SchemaError(f"{labels_path}:{line}: duplicate label for id {sid}")
            labels[sid] = float(row[1])
            split_of[sid] = row[2] if has_split else "all"
    seqs: dict = {}
    for m, path in paths.items():
        d = dims[m]
        rows: dict = {}
        with Path(path).open(newline="") as f:
            reader = csv.reader(f)
            next(reader)
            for line, row in enumerate(reader, start=2):
                if len(row) - 2 != d:
                    raise SchemaError(f"{path}:{line}: expected {d} features for modality {m}, "
                                      f"got {len(row) - 2}")
                sid, t = int(row[0]), int(row[1])
                if sid not in labels:
                    raise SchemaError(f"{path}:{line}: id {sid} has no label")
                per = rows.setdefault(sid, {})
                if t in per:
                    raise SchemaError(f"{path}:{line}: duplicate (id, t) = ({sid}, {t})")
                per[t] = [float(v) for v in row[2:]]
        for sid, per in rows.items():
            seqs.setdefault(sid, {})[m] = np.array([per[t] for t in sorted(per)], dtype=np.float64)
    out: dict = {}
    for sid, y in labels.items():
        if sid not in seqs:
            raise SchemaError(f"{labels_path}: id {sid} has no features in any modality")
        out.setdefault(split_of[sid], []).append(AlignedSample(seqs[sid], y, sid))
    return out


def load_dataset(data_dir: str | Path, modalities, dims) -> SynthDataset:
    data_dir = Path(data_dir)
    labels = data_dir / "labels.csv"
    if not labels.exists():
        raise FileNotFoundError(f"no dataset at {data_dir} (labels.csv missing); "
                                f"run the 'generate' subcommand first")
    paths = {m: data_dir / f"features_{m}.csv" for m in modalities}
    splits = ingest_csv(paths, labels, dict(zip(modalities, dims)))
    return SynthDataset(splits.get("train", []), splits.get("val", []), splits.get("test", []))


def write_manifest(ds: SynthDataset, path: str | Path, extra: dict | None = None) -> dict:
    doc = {
        "generator": "synthetic stand-in (y-scaled sinusoids through random projections)",
        "spec": ds.spec.to_dict() if ds.spec else None,
        "seed": ds.seed,
        "split_sizes": {k: len(v) for k, v in ds.splits().items()},
        "content_hash": dataset_hash(ds),
    }
    if extra:
        doc.update(extra)
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.replace(p)
    return doc
