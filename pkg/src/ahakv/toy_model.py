"""A small seeded decoder-only transformer in numpy.

The model is untrained: weights are Gaussian draws from the seed. It exists
so eviction policies can be exercised end to end on real per-head Q/K/V
streams, where every K/V read during decoding goes through a cache object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .attention import causal_softmax
from .rng import stream

INIT_STD = 0.02


@dataclass(frozen=True)
class ToyModelConfig:
    vocab: int = 64
    layers: int = 2
    heads: int = 2
    head_dim: int = 16
    mlp_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab", "layers", "heads", "head_dim", "mlp_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim


class KVCache(Protocol):
    """Per-(layer, head) key/value store consulted during decoding."""

    def prefill(self, layer: int, head: int, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> None: ...

    def step(self, layer: int, head: int, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray: ...


class DenseCache:
    """Keeps every key and value; decoding through it equals full attention."""

    def __init__(self):
        self._kv: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def prefill(self, layer, head, q, k, v):
        self._kv[layer, head] = (k.copy(), v.copy())

    def step(self, layer, head, q, k, v):
        keys, values = self._kv[layer, head]
        keys = np.vstack([keys, k])
        values = np.vstack([values, v])
        self._kv[layer, head] = (keys, values)
        logits = keys @ q / math.sqrt(q.shape[0])
        p = np.exp(logits - logits.max())
        return (p / p.sum()) @ values


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _positions(pos: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal position table scaled to the embedding init scale."""
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = np.asarray(pos, dtype=np.float64)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)[:, :dim]
    return INIT_STD * table


@dataclass(frozen=True)
class _Layer:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


class ToyModel:
    """Pre-norm decoder with tied embeddings and sinusoidal positions."""

    def __init__(self, cfg: ToyModelConfig, embedding: np.ndarray, layers: list[_Layer]):
        self.cfg = cfg
        self.embedding = embedding
        self.layers = tuple(layers)

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("expected a nonempty 1-D token sequence")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab:
            raise ValueError(f"token ids must lie in [0, {self.cfg.vocab})")
        return tokens

    def _embed(self, tokens: np.ndarray, start: int) -> np.ndarray:
        pos = np.arange(start, start + tokens.size)
        return self.embedding[tokens] + _positions(pos, self.cfg.dim)

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        # (n, dim) -> (heads, n, head_dim)
        return x.reshape(x.shape[0], self.cfg.heads, self.cfg.head_dim).transpose(1, 0, 2)

    def _mlp(self, layer: _Layer, h: np.ndarray) -> np.ndarray:
        return _gelu(_layer_norm(h) @ layer.w1) @ layer.w2

    def _logits(self, h: np.ndarray) -> np.ndarray:
        return _layer_norm(h) @ self.embedding.T

    def forward(self, tokens) -> np.ndarray:
        """Full causal forward without any cache; returns (n, vocab) logits."""
        return self.prefill(tokens, cache=None)

    def prefill(self, tokens, cache: KVCache | None) -> np.ndarray:
        """Run the prompt with full causal attention, handing each head's Q/K/V to ``cache``."""
        tokens = self._check_tokens(tokens)
        h = self._embed(tokens, 0)
        scale = 1.0 / math.sqrt(self.cfg.head_dim)
        for li, layer in enumerate(self.layers):
            x = _layer_norm(h)
            q, k, v = (self._split_heads(x @ w) for w in (layer.wq, layer.wk, layer.wv))
            outs = []
            for hi in range(self.cfg.heads):
                attn = causal_softmax(np.tril(q[hi] @ k[hi].T) * scale)
                outs.append(attn @ v[hi])
                if cache is not None:
                    cache.prefill(li, hi, q[hi], k[hi], v[hi])
            h = h + np.concatenate(outs, axis=1) @ layer.wo
            h = h + self._mlp(layer, h)
        return self._logits(h)

    def decode_step(self, token: int, position: int, cache: KVCache) -> np.ndarray:
        """Process one new token at ``position``; attention reads only what ``cache`` keeps."""
        tok = self._check_tokens([token])
        h = self._embed(tok, position)
        for li, layer in enumerate(self.layers):
            x = _layer_norm(h)
            q, k, v = (self._split_heads(x @ w) for w in (layer.wq, layer.wk, layer.wv))
            outs = [cache.step(li, hi, q[hi, 0], k[hi, 0], v[hi, 0]) for hi in range(self.cfg.heads)]
            h = h + np.concatenate(outs)[None, :] @ layer.wo
            h = h + self._mlp(layer, h)
        return self._logits(h)[0]


def build_toy_model(cfg: ToyModelConfig) -> ToyModel:
    dim, hidden = cfg.dim, cfg.dim * cfg.mlp_mult
    out_std = INIT_STD / math.sqrt(cfg.layers)

    def draw(name, shape, std=INIT_STD):
        return std * stream(cfg.seed, "toy-model", name).standard_normal(shape)

    embedding = draw("embedding", (cfg.vocab, dim))
    layers = [
        _Layer(
            wq=draw(f"{i}.wq", (dim, dim)),
            wk=draw(f"{i}.wk", (dim, dim)),
            wv=draw(f"{i}.wv", (dim, dim)),
            wo=draw(f"{i}.wo", (dim, dim), out_std),
            w1=draw(f"{i}.w1", (dim, hidden)),
            w2=draw(f"{i}.w2", (hidden, dim), out_std),
        )
        for i in range(cfg.layers)
    ]
    return ToyModel(cfg, embedding, layers)


def greedy_decode(
    model: ToyModel,
    prompt,
    steps: int,
    cache: KVCache | None = None,
    on_token: Callable[[int, int], None] | None = None,
) -> list[int]:
    """Greedy continuation of ``prompt``; argmax ties resolve to the lower token id.

    The first token comes from the prefill logits; each later token needs one
    ``decode_step`` of its predecessor. ``on_token(step, token)`` is called as
    each token is emitted, after the cache update that produced it.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    prompt = model._check_tokens(prompt)
    if steps == 0:
        return []
    cache = DenseCache() if cache is None else cache
    logits = model.prefill(prompt, cache)[-1]
    out: list[int] = []
    position = prompt.size
    for step in range(steps):
        if step:
            logits = model.decode_step(out[-1], position, cache)
            position += 1
        token = int(np.argmax(logits))
        out.append(token)
        if on_token is not None:
            on_token(step, token)
    return out


def reference_decode(model: ToyModel, prompt, steps: int) -> list[int]:
    """Greedy decoding by recomputing the full forward pass each step (no cache)."""
    seq = list(model._check_tokens(prompt))
    out: list[int] = []
    for _ in range(steps):
        token = int(np.argmax(model.forward(seq)[-1]))
        out.append(token)
        seq.append(token)
    return out
