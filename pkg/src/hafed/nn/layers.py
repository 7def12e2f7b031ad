"""Differentiable building blocks with hand-written backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes ``(dout, cache)`` and returns ``(dx, grads)`` where ``grads`` is keyed
by the same short names the forward read from its parameter dict.
Arrays are batched: sequences are ``(B, T, D)`` with a ``lengths`` vector.
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def linear_forward(x, W, b):
    return x @ W + b, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def layernorm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_backward(dy, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, {"gamma": dgamma, "beta": dbeta}


def positional_encoding(T: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin on even dims, cos on odd dims."""
    pos = np.arange(T, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.zeros((T, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def key_mask(lengths, T):
    """(B, T) boolean, True where a timestep is a real (non-padded) position."""
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def mha_forward(x, p, n_heads, valid):
    """Multi-head self-attention; padded keys receive zero attention weight.

    ``valid`` is the (B, T) key mask; every row must have at least one True.
    """
    B, T, D = x.shape
    dh = D // n_heads
    q, cq = linear_forward(x, p["Wq"], p["bq"])
    k, ck = linear_forward(x, p["Wk"], p["bk"])
    v, cv = linear_forward(x, p["Wv"], p["bv"])
    split = lambda t: t.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    qh, kh, vh = split(q), split(k), split(v)
    scale = 1.0 / np.sqrt(dh)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores = np.where(valid[:, None, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    ctx = (w @ vh).transpose(0, 2, 1, 3).reshape(B, T, D)
    out, co = linear_forward(ctx, p["Wo"], p["bo"])
    return out, (cq, ck, cv, co, qh, kh, vh, w, scale, n_heads)


def mha_backward(dout, cache):
    cq, ck, cv, co, qh, kh, vh, w, scale, n_heads = cache
    B, H, T, dh = qh.shape
    dctx, g_o = linear_backward(dout, co)
    dctx_h = dctx.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    dw = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = w.transpose(0, 1, 3, 2) @ dctx_h
    ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, T, H * dh)
    dxq, g_q = linear_backward(merge(dqh), cq)
    dxk, g_k = linear_backward(merge(dkh), ck)
    dxv, g_v = linear_backward(merge(dvh), cv)
    grads = {"Wq": g_q["W"], "bq": g_q["b"], "Wk": g_k["W"], "bk": g_k["b"],
             "Wv": g_v["W"], "bv": g_v["b"], "Wo": g_o["W"], "bo": g_o["b"]}
    return dxq + dxk + dxv, grads


def encoder_layer_forward(x, p, n_heads, valid, norm="post"):
    """One transformer layer with residual connections.

    ``pre``:  h = x + MHA(LN1(x)),  out = h + FFN(LN2(h))
    ``post``: h = LN1(x + MHA(x)),  out = LN2(h + FFN(h))
    """
    if norm == "pre":
        n1, c_ln1 = layernorm_forward(x, p["ln1_g"], p["ln1_b"])
        a, c_att = mha_forward(n1, p, n_heads, valid)
        h = x + a
        n2, c_ln2 = layernorm_forward(h, p["ln2_g"], p["ln2_b"])
        f, c_ffn = _ffn_forward(n2, p)
        return h + f, (norm, c_att, c_ln1, c_ffn, c_ln2)
    if norm != "post":
        raise ValueError(f"unknown norm placement {norm!r}")
    a, c_att = mha_forward(x, p, n_heads, valid)
    h, c_ln1 = layernorm_forward(x + a, p["ln1_g"], p["ln1_b"])
    f, c_ffn = _ffn_forward(h, p)
    out, c_ln2 = layernorm_forward(h + f, p["ln2_g"], p["ln2_b"])
    return out, (norm, c_att, c_ln1, c_ffn, c_ln2)


def _ffn_forward(x, p):
    f1, c_f1 = linear_forward(x, p["W1"], p["b1"])
    r, mask = relu_forward(f1)
    f2, c_f2 = linear_forward(r, p["W2"], p["b2"])
    return f2, (c_f1, mask, c_f2)


def _ffn_backward(df, cache):
    c_f1, mask, c_f2 = cache
    dr, g_f2 = linear_backward(df, c_f2)
    dx, g_f1 = linear_backward(relu_backward(dr, mask), c_f1)
    return dx, {"W1": g_f1["W"], "b1": g_f1["b"], "W2": g_f2["W"], "b2": g_f2["b"]}


def encoder_layer_backward(dout, cache):
    norm, c_att, c_ln1, c_ffn, c_ln2 = cache
    if norm == "pre":
        dn2, g_ffn = _ffn_backward(dout, c_ffn)
        dh2, g_ln2 = layernorm_backward(dn2, c_ln2)
        dh = dout + dh2
        dn1, g_att = mha_backward(dh, c_att)
        dx1, g_ln1 = layernorm_backward(dn1, c_ln1)
        dx = dh + dx1
    else:
        ds2, g_ln2 = layernorm_backward(dout, c_ln2)
        dh, g_ffn = _ffn_backward(ds2, c_ffn)
        dh = dh + ds2
        ds1, g_ln1 = layernorm_backward(dh, c_ln1)
        dx, g_att = mha_backward(ds1, c_att)
        dx = dx + ds1
    grads = dict(g_att)
    grads.update(g_ffn)
    grads.update({"ln1_g": g_ln1["gamma"], "ln1_b": g_ln1["beta"],
                  "ln2_g": g_ln2["gamma"], "ln2_b": g_ln2["beta"]})
    return dx, grads


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward(x, Wx, Wh, b, lengths):
    """LSTM over (B, T, D); state is frozen past each sequence's length.

    Gate order in the 4H axis is input, forget, cell, output.
    Returns the hidden state at each sequence's last real step.
    """
    B, T, _ = x.shape
    H = Wh.shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    steps = []
    xw = x @ Wx + b
    active = key_mask(lengths, T).astype(np.float64)
    for t in range(T):
        z = xw[:, t] + h @ Wh
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = active[:, t:t + 1]
        steps.append((h, c, i, f, g, o, tc, m))
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
    return h, (x, Wx, Wh, steps)


def lstm_backward(dh_last, cache):
    x, Wx, Wh, steps = cache
    B, T, _ = x.shape
    H = Wh.shape[0]
    dz_all = np.zeros((B, T, 4 * H))
    dWh = np.zeros_like(Wh)
    dh = dh_last
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, tc, m = steps[t]
        dh_new = dh * m
        dc_new = dc * m + dh_new * o * (1.0 - tc * tc)
        do = dh_new * tc
        di = dc_new * g
        dg = dc_new * i
        df = dc_new * c_prev
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                             dg * (1 - g * g), do * o * (1 - o)], axis=1)
        dz_all[:, t] = dz
        dWh += h_prev.T @ dz
        dh = dh * (1.0 - m) + dz @ Wh.T
        dc = dc * (1.0 - m) + dc_new * f
    dx = dz_all @ Wx.T
    dWx = x.reshape(-1, x.shape[-1]).T @ dz_all.reshape(-1, 4 * H)
    return dx, {"Wx": dWx, "Wh": dWh, "b": dz_all.sum(axis=(0, 1))}
