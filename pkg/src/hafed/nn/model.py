"""HA-Fedformer assembly: per-modality stems and transformer stacks feeding a fused LSTM decoder.

Two forward routes share one parameter layout:

* client mode (a :class:`SeqBatch` of modality ``m``): the sequence goes
  through stem ``m`` once, then through *every* modality's stack, and the
  decoder reads the mean of those embeddings.
* global mode (an :class:`AlignedBatch`): each present modality goes through
  its own stem and stack only; embeddings are averaged over the modalities
  present at each timestep.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from hafed.params import ParamMap
from hafed.nn import layers as L

STACK_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo",
              "ln1_g", "ln1_b", "W1", "b1", "W2", "b2", "ln2_g", "ln2_b")


@dataclass(frozen=True)
class ArchSpec:
    modalities: tuple = ("L", "A", "V")
    input_dims: tuple = (8, 5, 6)
    t_min: int = 4
    t_max: int = 8
    d_model: int = 8
    n_heads: int = 2
    n_layers: int = 1
    ffn_dim: int = 16
    lstm_hidden: int = 8
    dense_widths: tuple = (8,)
    out_min: float = -3.0
    out_max: float = 3.0
    norm: str = "post"  # layer-norm placement in the encoder layers: "post" or "pre"

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        self.validate()

    def validate(self) -> None:
        if len(self.modalities) < 1 or len(set(self.modalities)) != len(self.modalities):
            raise ValueError("modalities must be non-empty and unique")
        if len(self.input_dims) != len(self.modalities):
            raise ValueError("input_dims must have one entry per modality")
        dims = [*self.input_dims, self.d_model, self.n_heads, self.n_layers,
                self.ffn_dim, self.lstm_hidden, *self.dense_widths, self.t_min]
        if min(dims) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.t_max < self.t_min:
            raise ValueError("t_max must be >= t_min")
        if not self.out_min < self.out_max:
            raise ValueError("output range must be ordered")
        if self.norm not in ("pre", "post"):
            raise ValueError("norm must be 'pre' or 'post'")

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    def dim(self, m) -> int:
        return self.input_dims[self.modalities.index(m)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


def layout(arch: ArchSpec) -> list[tuple[str, tuple, tuple, int]]:
    """(key, shape, tag, fan_in) for every layer, in canonical order."""
    D, F, H = arch.d_model, arch.ffn_dim, arch.lstm_hidden
    out = []
    for m, d in zip(arch.modalities, arch.input_dims):
        out += [(f"stem.{m}.W", (d, D), ("stem", m), d),
                (f"stem.{m}.b", (D,), ("stem", m), d)]
    shapes = {"Wq": (D, D), "bq": (D,), "Wk": (D, D), "bk": (D,), "Wv": (D, D), "bv": (D,),
              "Wo": (D, D), "bo": (D,), "ln1_g": (D,), "ln1_b": (D,), "W1": (D, F), "b1": (F,),
              "W2": (F, D), "b2": (D,), "ln2_g": (D,), "ln2_b": (D,)}
    fans = {"W1": D, "b1": D, "W2": F, "b2": F}
    for m in arch.modalities:
        for j in range(arch.n_layers):
            for name in STACK_KEYS:
                out.append((f"stack.{m}.{j}.{name}", shapes[name], ("stack", m), fans.get(name, D)))
    out += [("decoder.lstm.Wx", (D, 4 * H), ("decoder", None), D),
            ("decoder.lstm.Wh", (H, 4 * H), ("decoder", None), H),
            ("decoder.lstm.b", (4 * H,), ("decoder", None), H)]
    prev = H
    for j, w in enumerate(arch.dense_widths):
        out += [(f"decoder.proj{j}.W", (prev, w), ("decoder", None), prev),
                (f"decoder.proj{j}.b", (w,), ("decoder", None), prev),
                (f"decoder.res{j}.W", (w, w), ("decoder", None), w),
                (f"decoder.res{j}.b", (w,), ("decoder", None), w)]
        prev = w
    out += [("decoder.out.W", (prev, 1), ("decoder", None), prev),
            ("decoder.out.b", (1,), ("decoder", None), prev)]
    return out


def param_count(arch: ArchSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape, _, _ in layout(arch))


def init_params(arch: ArchSpec, seed: int) -> ParamMap:
    """Uniform(+-1/sqrt(fan_in)) weights, unit LayerNorm gains, LSTM forget bias 1."""
    rng = np.random.default_rng(seed)
    arrays, tags = {}, {}
    for key, shape, tag, fan_in in layout(arch):
        if key.endswith(("ln1_g", "ln2_g")):
            v = np.ones(shape)
        elif key.endswith(("ln1_b", "ln2_b")):
            v = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            v = rng.uniform(-bound, bound, size=shape)
        if key == "decoder.lstm.b":
            H = arch.lstm_hidden
            v[H:2 * H] = 1.0
        arrays[key], tags[key] = v, tag
    return ParamMap(arrays, tags)


# --- batches -----------------------------------------------------------------

@dataclass
class SeqBatch:
    """Padded unimodal batch: x (B, T, d), lengths (B,), y (B,)."""
    x: np.ndarray
    lengths: np.ndarray
    y: np.ndarray
    modality: str

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "SeqBatch":
        idx = np.asarray(idx)
        lengths = self.lengths[idx]
        T = int(lengths.max())
        return SeqBatch(self.x[idx, :T], lengths, self.y[idx], self.modality)


@dataclass
class AlignedBatch:
    """Padded multimodal batch; a length of 0 marks the modality missing for that sample."""
    xs: dict
    lengths: dict
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "AlignedBatch":
        idx = np.asarray(idx)
        xs, lengths = {}, {}
        for m, x in self.xs.items():
            lm = self.lengths[m][idx]
            T = max(int(lm.max()), 1)
            xs[m], lengths[m] = x[idx, :T], lm
        return AlignedBatch(xs, lengths, self.y[idx])


def _pad(seqs, d):
    T = max([len(s) for s in seqs if s is not None] + [1])
    x = np.zeros((len(seqs), T, d))
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        if s is not None:
            x[i, :len(s)] = s
            lengths[i] = len(s)
    return x, lengths


def make_seq_batch(samples, modality: str, dim: int) -> SeqBatch:
    x, lengths = _pad([s.x for s in samples], dim)
    return SeqBatch(x, lengths, np.array([s.y for s in samples], dtype=np.float64), modality)


def make_aligned_batch(samples, arch: ArchSpec) -> AlignedBatch:
    xs, lengths = {}, {}
    for m, d in zip(arch.modalities, arch.input_dims):
        xs[m], lengths[m] = _pad([s.xs.get(m) for s in samples], d)
    return AlignedBatch(xs, lengths, np.array([s.y for s in samples], dtype=np.float64))


# --- model -------------------------------------------------------------------

def _stack_params(params: ParamMap, m, j):
    pre = f"stack.{m}.{j}."
    return {k: params[pre + k] for k in STACK_KEYS}


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


class HAFedformer:
    """Stateless model: all methods are pure functions of (params, batch)."""

    def __init__(self, arch: ArchSpec, loss_kind: str = "squared"):
        if loss_kind not in ("squared", "l1"):
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        self.arch = arch
        self.loss_kind = loss_kind
        self._pe = L.positional_encoding(max(arch.t_max, 1), arch.d_model)

    def init_params(self, seed: int) -> ParamMap:
        return init_params(self.arch, seed)

    def _pe_rows(self, T):
        if T > self._pe.shape[0]:
            self._pe = L.positional_encoding(T, self.arch.d_model)
        return self._pe[:T]

    # encoder pieces
    def _stem(self, params, m, x):
        y, c = L.linear_forward(x, params[f"stem.{m}.W"], params[f"stem.{m}.b"])
        return y + self._pe_rows(x.shape[1]), c

    def _stack(self, params, m, e, valid):
        caches = []
        for j in range(self.arch.n_layers):
            e, c = L.encoder_layer_forward(e, _stack_params(params, m, j), self.arch.n_heads, valid,
                                            self.arch.norm)
            caches.append(c)
        return e, caches

    def _stack_backward(self, de, caches, m, grads):
        for j in range(self.arch.n_layers - 1, -1, -1):
            de, g = L.encoder_layer_backward(de, caches[j])
            for k, v in g.items():
                grads[f"stack.{m}.{j}.{k}"] += v
        return de

    # decoder
    def _decoder(self, params, fused, lengths):
        h, c_lstm = L.lstm_forward(fused, params["decoder.lstm.Wx"], params["decoder.lstm.Wh"],
                                   params["decoder.lstm.b"], lengths)
        caches = []
        a = h
        for j in range(len(self.arch.dense_widths)):
            z, cp = L.linear_forward(a, params[f"decoder.proj{j}.W"], params[f"decoder.proj{j}.b"])
            a, mp = L.relu_forward(z)
            z2, cr = L.linear_forward(a, params[f"decoder.res{j}.W"], params[f"decoder.res{j}.b"])
            r, mr = L.relu_forward(z2)
            a = a + r
            caches.append((cp, mp, cr, mr))
        out, co = L.linear_forward(a, params["decoder.out.W"], params["decoder.out.b"])
        return out[:, 0], (c_lstm, caches, co)

    def _decoder_backward(self, dpred, cache, grads):
        c_lstm, caches, co = cache
        da, g = L.linear_backward(dpred[:, None], co)
        grads["decoder.out.W"] += g["W"]
        grads["decoder.out.b"] += g["b"]
        for j in range(len(caches) - 1, -1, -1):
            cp, mp, cr, mr = caches[j]
            dz2, g = L.linear_backward(L.relu_backward(da, mr), cr)
            grads[f"decoder.res{j}.W"] += g["W"]
            grads[f"decoder.res{j}.b"] += g["b"]
            da = da + dz2
            da, g = L.linear_backward(L.relu_backward(da, mp), cp)
            grads[f"decoder.proj{j}.W"] += g["W"]
            grads[f"decoder.proj{j}.b"] += g["b"]
        dfused, g = L.lstm_backward(da, c_lstm)
        for k, v in g.items():
            grads[f"decoder.lstm.{k}"] += v
        return dfused

    # full forward
    def _forward(self, params, batch):
        if isinstance(batch, SeqBatch):
            return self._forward_client(params, batch)
        return self._forward_global(params, batch)

    def _forward_client(self, params, batch):
        m = batch.modality
        e0, c_stem = self._stem(params, m, batch.x)
        valid = L.key_mask(batch.lengths, batch.x.shape[1])
        outs, caches = [], []
        for mm in self.arch.modalities:
            e, c = self._stack(params, mm, e0, valid)
            outs.append(e)
            caches.append(c)
        fused = sum(outs[1:], outs[0]) / len(outs)
        pred, c_dec = self._decoder(params, fused, batch.lengths)
        return pred, ("client", m, c_stem, caches, c_dec)

    def _forward_global(self, params, batch):
        present, outs, weights, caches = [], [], [], []
        for m in self.arch.modalities:
            if m not in batch.xs or not np.any(batch.lengths[m] > 0):
                continue
            x, lm = batch.xs[m], batch.lengths[m]
            e0, c_stem = self._stem(params, m, x)
            valid = L.key_mask(np.maximum(lm, 1), x.shape[1])
            e, c = self._stack(params, m, e0, valid)
            present.append(m)
            outs.append(e)
            weights.append(L.key_mask(lm, x.shape[1]).astype(np.float64))
            caches.append((c_stem, c))
        if not present:
            raise ValueError("batch has no present modality")
        T = max(e.shape[1] for e in outs)
        B, D = outs[0].shape[0], self.arch.d_model
        total = np.zeros((B, T, D))
        count = np.zeros((B, T))
        for e, w in zip(outs, weights):
            total[:, :e.shape[1]] += e * w[..., None]
            count[:, :e.shape[1]] += w
        denom = np.maximum(count, 1.0)
        fused = total / denom[..., None]
        fused_len = np.max([batch.lengths[m] for m in present], axis=0)
        if np.any(fused_len == 0):
            raise ValueError("every sample needs at least one present modality")
        pred, c_dec = self._decoder(params, fused, fused_len)
        return pred, ("global", present, weights, denom, caches, c_dec)

    def predict(self, params: ParamMap, batch) -> np.ndarray:
        pred, _ = self._forward(params, batch)
        _check_finite(pred, "prediction")
        return pred

    def loss(self, params: ParamMap, batch) -> float:
        pred = self.predict(params, batch)
        r = pred - batch.y
        return float(np.mean(r * r) if self.loss_kind == "squared" else np.mean(np.abs(r)))

    def loss_and_grad(self, params: ParamMap, batch) -> tuple[float, ParamMap]:
        pred, cache = self._forward(params, batch)
        _check_finite(pred, "prediction")
        r = pred - batch.y
        n = len(r)
        if self.loss_kind == "squared":
            loss, dpred = float(np.mean(r * r)), 2.0 * r / n
        else:
            loss, dpred = float(np.mean(np.abs(r))), np.sign(r) / n
        grads = params.zeros_like()
        self._backward(dpred, cache, grads)
        for k, v in grads.items():
            _check_finite(v, f"gradient {k}")
        return loss, grads

    def _backward(self, dpred, cache, grads):
        kind = cache[0]
        if kind == "client":
            _, m, c_stem, caches, c_dec = cache
            dfused = self._decoder_backward(dpred, c_dec, grads)
            de = dfused / len(caches)
            de0 = 0.0
            for mm, c in zip(self.arch.modalities, caches):
                de0 = de0 + self._stack_backward(de, c, mm, grads)
            _, g = L.linear_backward(de0, c_stem)
            grads[f"stem.{m}.W"] += g["W"]
            grads[f"stem.{m}.b"] += g["b"]
        else:
            _, present, weights, denom, caches, c_dec = cache
            dfused = self._decoder_backward(dpred, c_dec, grads) / denom[..., None]
            for m, w, (c_stem, c) in zip(present, weights, caches):
                de = dfused[:, :w.shape[1]] * w[..., None]
                de0 = self._stack_backward(de, c, m, grads)
                _, g = L.linear_backward(de0, c_stem)
                grads[f"stem.{m}.W"] += g["W"]
                grads[f"stem.{m}.b"] += g["b"]

    def encode(self, params: ParamMap, m, x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        """Own-encoder embeddings of modality ``m``: (B, T, d_model)."""
        e0, _ = self._stem(params, m, x)
        e, _ = self._stack(params, m, e0, L.key_mask(np.maximum(lengths, 1), x.shape[1]))
        return e


# --- single-sample operations ------------------------------------------------

def stem_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise (1x1) temporal convolution: each timestep mapped d_m -> d_model."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"input has shape {x.shape}, kernel expects feature dim {W.shape[0]}")
    return x @ W + b


def add_positional_encoding(x: np.ndarray) -> np.ndarray:
    T, D = x.shape
    return x + L.positional_encoding(T, D)


def encoder_stack_forward(x: np.ndarray, stack: list[dict], n_heads: int, norm: str = "post") -> np.ndarray:
    """Run one modality's stack (a list of per-layer parameter dicts) on a T x d_model sequence."""
    e = np.asarray(x, dtype=np.float64)[None]
    valid = np.ones((1, e.shape[1]), dtype=bool)
    for p in stack:
        e, _ = L.encoder_layer_forward(e, p, n_heads, valid, norm)
    _check_finite(e, "encoder activations")
    return e[0]


def fuse_embeddings(embeddings, present_mask=None) -> np.ndarray:
    """Arithmetic mean over the present embeddings."""
    if present_mask is None:
        present_mask = [True] * len(embeddings)
    chosen = [np.asarray(e, dtype=np.float64) for e, p in zip(embeddings, present_mask) if p]
    if not chosen:
        raise ValueError("fusion needs at least one present embedding")
    shape = chosen[0].shape
    if any(e.shape != shape for e in chosen):
        raise ValueError("embeddings must share one shape")
    return sum(chosen[1:], chosen[0]) / len(chosen)


def decoder_forward(fused: np.ndarray, params: ParamMap, arch: ArchSpec) -> float:
    model = HAFedformer(arch)
    fused = np.asarray(fused, dtype=np.float64)
    pred, _ = model._decoder(params, fused[None], np.array([fused.shape[0]]))
    _check_finite(pred, "decoder output")
    return float(pred[0])


def stack_layers(params: ParamMap, arch: ArchSpec, m) -> list[dict]:
    return [_stack_params(params, m, j) for j in range(arch.n_layers)]


def as_batch(sample, arch: ArchSpec, mode):
    """Wrap one SeqSample / AlignedSample as a batch for the requested mode."""
    if mode == "global":
        if not hasattr(sample, "xs"):
            raise ValueError("global mode needs an AlignedSample")
        return make_aligned_batch([sample], arch)
    m = mode[1] if isinstance(mode, tuple) else sample.modality
    if getattr(sample, "modality", None) != m:
        raise ValueError(f"client mode for modality {m!r} needs a SeqSample of that modality")
    return make_seq_batch([sample], m, arch.dim(m))


def model_forward(sample, params: ParamMap, arch: ArchSpec, mode="client") -> float:
    """mode: ``("client", m)`` / ``"client"`` (modality taken from the sample) or ``"global"``."""
    return float(HAFedformer(arch).predict(params, as_batch(sample, arch, mode))[0])


def backward(sample, params: ParamMap, arch: ArchSpec, mode="client", loss_kind="squared") -> ParamMap:
    _, grads = HAFedformer(arch, loss_kind).loss_and_grad(params, as_batch(sample, arch, mode))
    return grads
