"""Desk-scale numeric transformer attention in fp32.

Each layer is ``h <- h + attention(h W_Q, h W_K, h W_V) W_O`` with grouped
kv-heads and causal masking. There is no positional encoding, MLP or norm:
those carry no KV cache and are accounted for analytically elsewhere.
Inputs are synthetic embeddings drawn per position from the run seed, so the
embedding of position ``i`` never depends on how many tokens are processed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityExceeded, ShapeMismatch
from .workload import ModelSpec

DTYPE = np.float32


@dataclass(frozen=True)
class Weights:
    wq: np.ndarray  # (L, D, D)
    wk: np.ndarray  # (L, D, D_kv)
    wv: np.ndarray  # (L, D, D_kv)
    wo: np.ndarray  # (L, D, D)


def init_weights(m: ModelSpec, seed: int) -> Weights:
    rng = np.random.default_rng([seed, 1])
    scale = 1.0 / np.sqrt(m.hidden_dim)
    L, D, kv = m.num_layers, m.hidden_dim, m.kv_dim

    def draw(*shape):
        return (rng.standard_normal(shape) * scale).astype(DTYPE)

    return Weights(draw(L, D, D), draw(L, D, kv), draw(L, D, kv), draw(L, D, D))


def embeddings(m: ModelSpec, seed: int, start: int, count: int) -> np.ndarray:
    """Synthetic input rows for positions ``start .. start+count-1``."""
    rows = [np.random.default_rng([seed, 2, pos]).standard_normal(m.hidden_dim)
            for pos in range(start, start + count)]
    if not rows:
        return np.zeros((0, m.hidden_dim), DTYPE)
    return np.asarray(rows, dtype=DTYPE)


class HeadKvCache:
    """Per-(layer, kv-head) key/value blocks, each contiguous and pre-allocated."""

    def __init__(self, num_layers: int, num_kv_heads: int, head_dim: int, capacity: int):
        shape = (num_layers, num_kv_heads, capacity, head_dim)
        self.keys = np.zeros(shape, DTYPE)
        self.values = np.zeros(shape, DTYPE)
        self.lengths = np.zeros((num_layers, num_kv_heads), dtype=np.int64)
        self.capacity = capacity

    @classmethod
    def for_model(cls, m: ModelSpec, capacity: int) -> "HeadKvCache":
        return cls(m.num_layers, m.num_kv_heads, m.head_dim, capacity)

    @property
    def head_dim(self) -> int:
        return self.keys.shape[-1]

    @property
    def s_cur(self) -> int:
        first = int(self.lengths.flat[0])
        if not (self.lengths == first).all():
            raise RuntimeError("cache blocks have diverging lengths mid-update")
        return first

    def block(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.lengths[layer, head]
        return self.keys[layer, head, :n], self.values[layer, head, :n]

    def layer_blocks(self, layer: int, heads: slice = slice(None)) -> tuple[np.ndarray, np.ndarray]:
        n = int(self.lengths[layer, heads].max())
        return self.keys[layer, heads, :n], self.values[layer, heads, :n]

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes


def append_kv(cache: HeadKvCache, layer: int, head: int, k_new: np.ndarray,
              v_new: np.ndarray) -> int:
    """Extend one head's blocks in place; earlier rows are left untouched."""
    if k_new.shape != v_new.shape or k_new.ndim != 2 or k_new.shape[1] != cache.head_dim:
        raise ShapeMismatch(f"expected (n, {cache.head_dim}) key/value rows, "
                            f"got {k_new.shape} and {v_new.shape}")
    n = int(cache.lengths[layer, head])
    end = n + k_new.shape[0]
    if end > cache.capacity:
        raise CapacityExceeded(f"layer {layer} head {head}: {end} tokens > capacity "
                               f"{cache.capacity}")
    cache.keys[layer, head, n:end] = k_new
    cache.values[layer, head, n:end] = v_new
    cache.lengths[layer, head] = end
    return end


def project_qkv(m: ModelSpec, weights: Weights, x: np.ndarray, layer: int):
    if x.ndim != 2 or x.shape[1] != m.hidden_dim:
        raise ShapeMismatch(f"input must be (n, {m.hidden_dim}), got {x.shape}")
    return x @ weights.wq[layer], x @ weights.wk[layer], x @ weights.wv[layer]


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def causal_mask(n_queries: int, n_keys: int, causal_offset: int) -> np.ndarray:
    """True where query ``i`` may attend to key ``j`` (``j <= offset + i``)."""
    return np.arange(n_keys)[None, :] <= causal_offset + np.arange(n_queries)[:, None]


def attention_head(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal_offset: int) -> np.ndarray:
    if q.ndim != 2 or k.ndim != 2 or v.shape != k.shape or q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"q {q.shape}, k {k.shape}, v {v.shape}")
    scale = DTYPE(1.0 / np.sqrt(q.shape[1]))
    scores = (q @ k.T) * scale
    scores = np.where(causal_mask(q.shape[0], k.shape[0], causal_offset), scores, -np.inf)
    return softmax_rows(scores) @ v


def full_attention_layer(q: np.ndarray, k_cache: np.ndarray, v_cache: np.ndarray,
                         causal_offset: int) -> np.ndarray:
    """Head-by-head attention for one layer.

    ``q`` is ``(n, H * D_h)``; ``k_cache`` / ``v_cache`` are ``(H_kv, S, D_h)``.
    Query head ``j`` reads kv-head ``j // (H / H_kv)``; outputs are concatenated
    in query-head order.
    """
    if k_cache.ndim != 3 or v_cache.shape != k_cache.shape:
        raise ShapeMismatch(f"k_cache {k_cache.shape}, v_cache {v_cache.shape}")
    n_kv, _, d_h = k_cache.shape
    if q.ndim != 2 or q.shape[1] % d_h or (q.shape[1] // d_h) % n_kv:
        raise ShapeMismatch(f"q {q.shape} does not split into heads of {d_h} over {n_kv} kv-heads")
    n_q = q.shape[1] // d_h
    per_kv = n_q // n_kv
    out = [attention_head(q[:, j * d_h:(j + 1) * d_h], k_cache[j // per_kv],
                          v_cache[j // per_kv], causal_offset)
           for j in range(n_q)]
    return np.concatenate(out, axis=1)


def split_heads(x: np.ndarray, head_dim: int) -> np.ndarray:
    """``(n, H * D_h)`` -> ``(H, n, D_h)``."""
    n = x.shape[0]
    return x.reshape(n, -1, head_dim).transpose(1, 0, 2)


class MiniEngine:
    """Resident-cache reference execution for one model and seed."""

    def __init__(self, m: ModelSpec, seed: int = 0):
        self.model = m
        self.seed = seed
        self.weights = init_weights(m, seed)

    def new_cache(self, capacity: int) -> HeadKvCache:
        return HeadKvCache.for_model(self.model, capacity)

    def embed(self, start: int, count: int) -> np.ndarray:
        return embeddings(self.model, self.seed, start, count)

    def forward(self, cache: HeadKvCache, x: np.ndarray) -> np.ndarray:
        """Run ``x`` (the next ``n`` positions) through every layer, appending KV."""
        m = self.model
        start = cache.s_cur
        h = x
        for layer in range(m.num_layers):
            q, k, v = project_qkv(m, self.weights, h, layer)
            k_heads, v_heads = split_heads(k, m.head_dim), split_heads(v, m.head_dim)
            for head in range(m.num_kv_heads):
                append_kv(cache, layer, head, k_heads[head], v_heads[head])
            k_all, v_all = cache.layer_blocks(layer)
            h = h + full_attention_layer(q, k_all, v_all, start) @ self.weights.wo[layer]
        return h

    def prefill(self, S: int, chunk: int, capacity: int | None = None):
        """Chunked prefill of ``S`` synthetic tokens.

        Returns the last position's hidden state (zeros when ``S == 0``) and the
        populated cache.
        """
        if chunk < 1:
            raise ValueError("chunk must be >= 1")
        cache = self.new_cache(S if capacity is None else capacity)
        last = np.zeros(self.model.hidden_dim, DTYPE)
        for start in range(0, S, chunk):
            n = min(chunk, S - start)
            last = self.forward(cache, self.embed(start, n))[-1]
        return last, cache

    def decode_step(self, cache: HeadKvCache, x_t: np.ndarray | None = None) -> np.ndarray:
        """Append one token (by default the next synthetic position) and return its output."""
        if cache.s_cur == 0:
            raise ValueError("decode requires a prefilled cache")
        if x_t is None:
            x_t = self.embed(cache.s_cur, 1)
        return self.forward(cache, np.atleast_2d(x_t).astype(DTYPE))[-1]


def prefill(m: ModelSpec, S: int, chunk: int, seed: int = 0, capacity: int | None = None):
    return MiniEngine(m, seed).prefill(S, chunk, capacity)


def decode_step(m: ModelSpec, cache: HeadKvCache, x_t: np.ndarray | None = None,
                seed: int = 0) -> np.ndarray:
    return MiniEngine(m, seed).decode_step(cache, x_t)
