"""Spatio-temporal graph learning: link-wise causal Transformer, adaptive mix-hop GCN,
and the inquirer that pools encoder states over each congestion event's slots."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .params import ParamStore

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_stacks: int = 2
    gcn_layers: int = 2
    adaptive_dim: int = 10
    window_slots: int = 72
    n_features: int = 2

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_stacks", "gcn_layers", "adaptive_dim",
                     "window_slots", "n_features"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


@dataclass(frozen=True)
class SpatioTemporalIndex:
    link: int
    slots: tuple[int, ...]

    def validate(self, n_slots: int):
        if not self.slots:
            raise IndexError(f"empty slot list for link {self.link}")
        s = np.asarray(self.slots)
        if np.any(np.diff(s) != 1):
            raise IndexError(f"slots must be ascending and contiguous, got {self.slots}")
        if s[0] < 0 or s[-1] >= n_slots:
            raise IndexError(f"slot {s[-1] if s[-1] >= n_slots else s[0]} outside [0, {n_slots})")


def positional_encoding(T: int, D: int) -> np.ndarray:
    if D % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {D}")
    pos = np.arange(T)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(0, D, 2) / D)
    pe = np.zeros((T, D))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = dm.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = dm.mean(centered * centered, axis=-1, keepdims=True)
    return centered / dm.sqrt(var + LN_EPS) * gain + bias


def embed_states(features, W: Tensor, b: Tensor, window_slots: int | None = None) -> Tensor:
    """Per-slot linear map of the ``[..., N, T, F]`` state features into ``D`` dims."""
    features = dm.as_tensor(features)
    if window_slots is not None and features.shape[-2] != window_slots:
        raise dm.DimensionError(f"expected {window_slots} slots, got {features.shape[-2]}")
    return features @ W + b


def causal_mask(T: int) -> np.ndarray:
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def attention_core(Z: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, n_heads: int) -> Tensor:
    """Masked multi-head attention output before the residual and normalisation."""
    *lead, T, D = Z.shape
    dh = D // n_heads

    def heads(x):
        return dm.transpose(dm.reshape(x, (*lead, T, n_heads, dh)),
                            (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))

    q, k, v = heads(Z @ Wq), heads(Z @ Wk), heads(Z @ Wv)
    scores = (q @ dm.transpose(k, (*range(len(lead) + 1), len(lead) + 2, len(lead) + 1))) * (1.0 / np.sqrt(dh))
    weights = dm.softmax_last(dm.masked_fill(scores, causal_mask(T)))
    out = weights @ v
    out = dm.transpose(out, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))
    return dm.reshape(out, (*lead, T, D))


def causal_self_attention(Z: Tensor, Wq, Wk, Wv, ln_gain, ln_bias, n_heads: int) -> Tensor:
    return layer_norm(Z + attention_core(Z, Wq, Wk, Wv, n_heads), ln_gain, ln_bias)


def feed_forward(S: Tensor, W1, b1, W2, b2, ln_gain, ln_bias) -> Tensor:
    hidden = dm.relu(S @ W1 + b1)
    return layer_norm(S + (hidden @ W2 + b2), ln_gain, ln_bias)


def adaptive_adjacency(A, alpha1: Tensor, alpha2: Tensor) -> Tensor:
    """Fixed adjacency plus a row-softmax of ``relu(alpha1 alpha2^T)``."""
    learned = dm.softmax_last(dm.relu(alpha1 @ dm.transpose(alpha2, (1, 0))))
    return dm.as_tensor(A) + learned


def gcn_mixhop(H0: Tensor, A_hat, thetas: Sequence[Tensor]) -> Tensor:
    """Sum-pooled hops ``H_i = relu(A_hat H_{i-1} Theta_i)`` over the link axis of ``[..., N, T, D]``."""
    nd = H0.ndim
    # move links next to features so A_hat acts on axis -2 for every slot
    perm = (*range(nd - 3), nd - 2, nd - 3, nd - 1)
    h = dm.transpose(H0, perm)
    A_hat = dm.as_tensor(A_hat)
    pooled = None
    for theta in thetas:
        h = dm.relu((A_hat @ h) @ theta)
        pooled = h if pooled is None else pooled + h
    return dm.transpose(pooled, perm)


def selection_matrix(indexes: Sequence[Sequence[SpatioTemporalIndex]], n_slots: int,
                     l_max: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """0/1 matrix ``[N, L_max, T]`` picking each event's slots, plus the event mask."""
    n_links = len(indexes)
    if l_max is None:
        l_max = max((len(evs) for evs in indexes), default=0)
    sel = np.zeros((n_links, l_max, n_slots))
    mask = np.zeros((n_links, l_max))
    for n, evs in enumerate(indexes):
        for i, idx in enumerate(evs):
            idx.validate(n_slots)
            sel[n, i, list(idx.slots)] = 1.0
            mask[n, i] = 1.0
    return sel, mask


def st_inquire(Hg: Tensor, indexes: Sequence[Sequence[SpatioTemporalIndex]]) -> tuple[Tensor, np.ndarray]:
    """Sum encoder states over each event's slots and zero-pad per link to ``L_max``."""
    sel, mask = selection_matrix(indexes, Hg.shape[-2])
    return dm.as_tensor(sel) @ Hg, mask


class Encoder:
    def __init__(self, cfg: EncoderConfig, adjacency: np.ndarray, store: ParamStore, prefix: str = "enc"):
        self.cfg = cfg
        self.adjacency = np.asarray(adjacency, dtype=np.float64)
        n_links = self.adjacency.shape[0]
        D = cfg.d_model
        p = store
        self.W_in = p.glorot(f"{prefix}.embed.W", (cfg.n_features, D))
        self.b_in = p.zeros(f"{prefix}.embed.b", (D,))
        self.alpha1 = p.normal(f"{prefix}.adaptive.alpha1", (n_links, cfg.adaptive_dim), 0.1)
        self.alpha2 = p.normal(f"{prefix}.adaptive.alpha2", (n_links, cfg.adaptive_dim), 0.1)
        self.stacks = []
        for s in range(cfg.n_stacks):
            q = f"{prefix}.stack{s}"
            layer = {
                "Wq": p.glorot(f"{q}.attn.Wq", (D, D)),
                "Wk": p.glorot(f"{q}.attn.Wk", (D, D)),
                "Wv": p.glorot(f"{q}.attn.Wv", (D, D)),
                "ln1_g": p.ones(f"{q}.ln1.gain", (D,)),
                "ln1_b": p.zeros(f"{q}.ln1.bias", (D,)),
                "W1": p.glorot(f"{q}.ffn.W1", (D, D)),
                "b1": p.zeros(f"{q}.ffn.b1", (D,)),
                "W2": p.glorot(f"{q}.ffn.W2", (D, D)),
                "b2": p.zeros(f"{q}.ffn.b2", (D,)),
                "ln2_g": p.ones(f"{q}.ln2.gain", (D,)),
                "ln2_b": p.zeros(f"{q}.ln2.bias", (D,)),
                # small hop weights keep the sum-pooled magnitudes bounded across stacks
                "thetas": [p.normal(f"{q}.gcn.theta{i}", (D, D), 0.5 / np.sqrt(D))
                           for i in range(cfg.gcn_layers)],
            }
            self.stacks.append(layer)
        self._pe = positional_encoding(cfg.window_slots, D)

    def transformer(self, Z: Tensor, layer: dict) -> Tensor:
        S = causal_self_attention(Z, layer["Wq"], layer["Wk"], layer["Wv"],
                                  layer["ln1_g"], layer["ln1_b"], self.cfg.n_heads)
        return feed_forward(S, layer["W1"], layer["b1"], layer["W2"], layer["b2"],
                            layer["ln2_g"], layer["ln2_b"])

    def forward(self, features) -> Tensor:
        """``[..., N, T, F]`` state features to ``H_g`` of shape ``[..., N, T, D]``."""
        Z = embed_states(features, self.W_in, self.b_in, self.cfg.window_slots) + self._pe
        A_hat = adaptive_adjacency(self.adjacency, self.alpha1, self.alpha2)
        H = Z
        for layer in self.stacks:
            H = gcn_mixhop(self.transformer(H, layer), A_hat, layer["thetas"])
        return H
