"""BiLSTM sentence encoder with hand-derived gradients.

Sequences are processed as right-padded batches. Because padding always
follows the valid positions, padded steps never influence valid outputs; the
reverse direction runs on per-row reversed copies of the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hgda.errors import DimensionMismatch, StaleCache


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Cache:
    """Forward activations; a cache may be consumed by exactly one backward call."""

    def __init__(self, **values):
        self.__dict__.update(values)
        self._live = True

    def consume(self):
        if not self._live:
            raise StaleCache("cache was already used by a backward pass")
        self._live = False
        return self


# ----------------------------------------------------------------------------
# unidirectional LSTM over a padded batch


def lstm_forward(X, W, U, b):
    """X: (B, T, D); W: (D, 4h); U: (h, 4h); b: (4h,). Gate order i, f, g, o."""
    B, T, _ = X.shape
    h = U.shape[0]
    XW = X @ W + b
    Hs = np.zeros((B, T, h))
    Cs = np.zeros((B, T, h))
    gates = np.zeros((B, T, 4 * h))
    h_prev = np.zeros((B, h))
    c_prev = np.zeros((B, h))
    for t in range(T):
        z = XW[:, t] + h_prev @ U
        a = np.empty_like(z)
        a[:, : 2 * h] = sigmoid(z[:, : 2 * h])
        a[:, 2 * h : 3 * h] = np.tanh(z[:, 2 * h : 3 * h])
        a[:, 3 * h :] = sigmoid(z[:, 3 * h :])
        i, f, g, o = a[:, :h], a[:, h : 2 * h], a[:, 2 * h : 3 * h], a[:, 3 * h :]
        c_prev = f * c_prev + i * g
        h_prev = o * np.tanh(c_prev)
        gates[:, t] = a
        Cs[:, t] = c_prev
        Hs[:, t] = h_prev
    return Hs, (X, W, U, Hs, Cs, gates)


def lstm_backward(cache, dH):
    X, W, U, Hs, Cs, gates = cache
    B, T, h = Hs.shape
    dZ = np.zeros((B, T, 4 * h))
    dU = np.zeros_like(U)
    dh_next = np.zeros((B, h))
    dc_next = np.zeros((B, h))
    zeros = np.zeros((B, h))
    for t in range(T - 1, -1, -1):
        a = gates[:, t]
        i, f, g, o = a[:, :h], a[:, h : 2 * h], a[:, 2 * h : 3 * h], a[:, 3 * h :]
        c = Cs[:, t]
        c_prev = Cs[:, t - 1] if t > 0 else zeros
        h_prev = Hs[:, t - 1] if t > 0 else zeros
        tc = np.tanh(c)
        dh = dH[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dZ[:, t]
        dz[:, :h] = dc * g * i * (1.0 - i)
        dz[:, h : 2 * h] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * h : 3 * h] = dc * i * (1.0 - g * g)
        dz[:, 3 * h :] = dh * tc * o * (1.0 - o)
        dU += h_prev.T @ dz
        dh_next = dz @ U.T
        dc_next = dc * f
    D = X.shape[2]
    dW = X.reshape(-1, D).T @ dZ.reshape(-1, 4 * h)
    db = dZ.sum(axis=(0, 1))
    dX = dZ @ W.T
    return dX, dW, dU, db


def reverse_index(lengths, T):
    """Per-row index that reverses each valid prefix and leaves padding in place."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def _gather_rows(X, idx):
    return np.take_along_axis(X, idx[:, :, None], axis=1)


# ----------------------------------------------------------------------------
# encoder


@dataclass(frozen=True)
class EncoderDims:
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    char_features: bool = False
    n_chars: int = 0
    char_embed_dim: int = 25
    char_out: int = 50
    char_cnn_width: int = 3

    @property
    def input_dim(self):
        return self.embed_dim + (2 * self.char_out if self.char_features else 0)


def init_encoder(dims: EncoderDims, rng, embedding=None) -> dict:
    if dims.hidden_dim % 2:
        raise DimensionMismatch(f"hidden_dim must be even (two directions), got {dims.hidden_dim}")
    h = dims.hidden_dim // 2
    D = dims.input_dim
    theta = {}
    if embedding is None:
        embedding = uniform_init(rng, (dims.vocab_size, dims.embed_dim), dims.embed_dim)
    elif embedding.shape != (dims.vocab_size, dims.embed_dim):
        raise DimensionMismatch(f"embedding {embedding.shape} != ({dims.vocab_size}, {dims.embed_dim})")
    theta["embedding"] = np.array(embedding, dtype=np.float64)
    for d in ("fwd", "bwd"):
        theta[f"{d}_W"] = uniform_init(rng, (D, 4 * h), D)
        theta[f"{d}_U"] = uniform_init(rng, (h, 4 * h), h)
        theta[f"{d}_b"] = uniform_init(rng, (4 * h,), h)
    if dims.char_features:
        ce, co, w = dims.char_embed_dim, dims.char_out, dims.char_cnn_width
        theta["char_embedding"] = uniform_init(rng, (dims.n_chars, ce), ce)
        theta["char_W"] = uniform_init(rng, (ce, 4 * co), ce)
        theta["char_U"] = uniform_init(rng, (co, 4 * co), co)
        theta["char_b"] = uniform_init(rng, (4 * co,), co)
        theta["cnn_W"] = uniform_init(rng, (w * ce, co), w * ce)
        theta["cnn_b"] = uniform_init(rng, (co,), w * ce)
    return theta


def _char_forward(theta, char_ids, char_lengths, width):
    """char_ids: (N, C) padded with 0; returns (N, 2*co) features and a cache."""
    N, C = char_ids.shape
    mask = (np.arange(C)[None, :] < char_lengths[:, None]).astype(np.float64)
    E = theta["char_embedding"][char_ids] * mask[:, :, None]
    ce = E.shape[2]

    Hs, lstm_cache = lstm_forward(E, theta["char_W"], theta["char_U"], theta["char_b"])
    last = char_lengths - 1
    lstm_out = Hs[np.arange(N), last]

    pad = width // 2
    Ep = np.pad(E, ((0, 0), (pad, width - 1 - pad), (0, 0)))
    windows = np.stack([Ep[:, j : j + C] for j in range(width)], axis=2).reshape(N, C, width * ce)
    act = np.tanh(windows @ theta["cnn_W"] + theta["cnn_b"])
    masked = np.where(mask[:, :, None] > 0, act, -np.inf)
    arg = masked.argmax(axis=1)  # (N, co)
    cnn_out = np.take_along_axis(act, arg[:, None, :], axis=1)[:, 0]
    cache = (char_ids, mask, lstm_cache, last, windows, act, arg, width)
    return np.concatenate([lstm_out, cnn_out], axis=1), cache


def _char_backward(theta, cache, dout, grads):
    char_ids, mask, lstm_cache, last, windows, act, arg, width = cache
    N, C = char_ids.shape
    co = theta["char_U"].shape[0]
    ce = theta["char_embedding"].shape[1]
    d_lstm, d_cnn = dout[:, :co], dout[:, co:]

    dHs = np.zeros((N, C, co))
    dHs[np.arange(N), last] = d_lstm
    dE, grads["char_W"], grads["char_U"], grads["char_b"] = lstm_backward(lstm_cache, dHs)

    dact = np.zeros_like(act)
    np.put_along_axis(dact, arg[:, None, :], d_cnn[:, None, :], axis=1)
    dpre = dact * (1.0 - act * act)
    grads["cnn_W"] = windows.reshape(-1, width * ce).T @ dpre.reshape(-1, co)
    grads["cnn_b"] = dpre.sum(axis=(0, 1))
    dwin = (dpre @ theta["cnn_W"].T).reshape(N, C, width, ce)
    pad = width // 2
    dEp = np.zeros((N, C + width - 1, ce))
    for j in range(width):
        dEp[:, j : j + C] += dwin[:, :, j]
    dE = dE + dEp[:, pad : pad + C]
    dE *= mask[:, :, None]
    gemb = np.zeros_like(theta["char_embedding"])
    np.add.at(gemb, char_ids.ravel(), dE.reshape(-1, ce))
    grads["char_embedding"] = gemb


def encode(theta, token_ids, lengths, dims: EncoderDims, *, char_ids=None, char_lengths=None,
           dropout=0.0, rng=None):
    """Encode a right-padded batch.

    token_ids: (B, T) int array; lengths: (B,) valid lengths.
    Returns features (B, T, H) with zeros at padded positions, and a Cache.
    Dropout (inverted) is applied to the encoder input vectors when
    ``dropout > 0``; ``rng`` then must be a numpy Generator.
    """
    token_ids = np.asarray(token_ids)
    lengths = np.asarray(lengths)
    B, T = token_ids.shape
    if theta["embedding"].shape[1] != dims.embed_dim:
        raise DimensionMismatch("embedding width does not match encoder dims")
    if lengths.min() < 1 or lengths.max() > T:
        raise DimensionMismatch(f"lengths {lengths} inconsistent with padded width {T}")
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)

    parts = [theta["embedding"][token_ids]]
    char_cache = None
    if dims.char_features:
        if char_ids is None:
            raise DimensionMismatch("char features enabled but no char ids given")
        C = char_ids.shape[2]
        feats, char_cache = _char_forward(
            theta, char_ids.reshape(B * T, C), np.maximum(char_lengths.reshape(B * T), 1), dims.char_cnn_width
        )
        parts.append(feats.reshape(B, T, -1))
    X = np.concatenate(parts, axis=2) if len(parts) > 1 else parts[0]
    if X.shape[2] != theta["fwd_W"].shape[0]:
        raise DimensionMismatch(f"encoder input width {X.shape[2]} != {theta['fwd_W'].shape[0]}")

    drop_mask = None
    if dropout > 0.0:
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        drop_mask = (rng.random(X.shape) >= dropout) / (1.0 - dropout)
        X = X * drop_mask

    rev = reverse_index(lengths, T)
    Hf, cf = lstm_forward(X, theta["fwd_W"], theta["fwd_U"], theta["fwd_b"])
    Hr, cr = lstm_forward(_gather_rows(X, rev), theta["bwd_W"], theta["bwd_U"], theta["bwd_b"])
    Hb = _gather_rows(Hr, rev)
    features = np.concatenate([Hf, Hb], axis=2) * mask[:, :, None]
    cache = Cache(token_ids=token_ids, lengths=lengths, mask=mask, rev=rev, cf=cf, cr=cr,
                  drop_mask=drop_mask, char_cache=char_cache, dims=dims, theta=theta)
    return features, cache


def encode_backward(cache: Cache, upstream) -> dict:
    """Gradients of sum(upstream * features) w.r.t. every encoder parameter."""
    cache.consume()
    theta, dims = cache.theta, cache.dims
    upstream = np.asarray(upstream) * cache.mask[:, :, None]
    h = theta["fwd_U"].shape[0]
    grads = {}
    dXf, grads["fwd_W"], grads["fwd_U"], grads["fwd_b"] = lstm_backward(cache.cf, upstream[:, :, :h])
    dHr = _gather_rows(upstream[:, :, h:], cache.rev)
    dXr, grads["bwd_W"], grads["bwd_U"], grads["bwd_b"] = lstm_backward(cache.cr, dHr)
    dX = dXf + _gather_rows(dXr, cache.rev)
    if cache.drop_mask is not None:
        dX = dX * cache.drop_mask
    dX = dX * cache.mask[:, :, None]

    E = dims.embed_dim
    gemb = np.zeros_like(theta["embedding"])
    np.add.at(gemb, cache.token_ids.ravel(), dX[:, :, :E].reshape(-1, E))
    grads["embedding"] = gemb
    if cache.char_cache is not None:
        B, T = cache.token_ids.shape
        _char_backward(theta, cache.char_cache, dX[:, :, E:].reshape(B * T, -1), grads)
    return {k: grads[k] for k in theta}


def pool(features, lengths=None):
    """Mean over valid rows. Accepts a single (L, H) matrix or a padded (B, T, H) batch."""
    features = np.asarray(features)
    if features.ndim == 2:
        return features.mean(axis=0)
    T = features.shape[1]
    mask = (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
    return (features * mask[:, :, None]).sum(axis=1) / np.asarray(lengths, dtype=np.float64)[:, None]


def pool_backward(dpooled, lengths, T):
    lengths = np.asarray(lengths)
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    return mask[:, :, None] * (dpooled / lengths[:, None])[:, None, :]
