"""Synthetic causal attention instances with i.i.d. standard normal Q/K/V."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .rng import stream


class ScaleMode(str, Enum):
    SCALED = "scaled_by_sqrt_d"
    UNSCALED = "unscaled"


@dataclass(frozen=True)
class QkvSet:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.q.ndim != 2 or self.q.shape != self.k.shape or self.q.shape != self.v.shape:
            raise ValueError(
                f"q, k, v must share an n x d shape, got {self.q.shape}, {self.k.shape}, {self.v.shape}"
            )
        if self.q.shape[0] < 1 or self.q.shape[1] < 1:
            raise ValueError("n and d must be >= 1")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]


@dataclass(frozen=True)
class SynthConfig:
    n: int
    d: int
    seed: int = 0
    scale_mode: ScaleMode = ScaleMode.SCALED

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be >= 1")


@dataclass(frozen=True)
class CausalLogits:
    """Lower-triangular logit matrix.

    Only ``w[i, :i+1]`` is meaningful; the strict upper triangle is stored as
    zeros and never read.
    """

    w: np.ndarray
    scale: float

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.w[i, : i + 1]


def gaussian_qkv(cfg: SynthConfig, *stream_path) -> QkvSet:
    rng = stream(cfg.seed, "qkv", *stream_path)
    q, k, v = rng.standard_normal((3, cfg.n, cfg.d))
    return QkvSet(q, k, v)


def logit_scale(d: int, scale_mode: ScaleMode | str) -> float:
    return 1.0 / math.sqrt(d) if ScaleMode(scale_mode) is ScaleMode.SCALED else 1.0


def causal_logits(q, k, scale_mode: ScaleMode | str = ScaleMode.SCALED) -> CausalLogits:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"q and k must share an n x d shape, got {q.shape} and {k.shape}")
    s = logit_scale(q.shape[1], scale_mode)
    w = np.tril(q @ k.T)
    if s != 1.0:
        w = w * s
    return CausalLogits(w, s)


def causal_softmax(w: np.ndarray, lambdas=None) -> np.ndarray:
    """Row-wise softmax over the lower triangle of ``w``; upper entries are exactly 0.

    ``lambdas`` optionally scales row ``i`` by ``lambdas[i]`` before the softmax.
    Works on any (m, n) block whose row ``i`` covers columns ``0..n-m+i``.
    """
    m, n = w.shape
    mask = np.tri(m, n, k=n - m, dtype=bool)
    x = w if lambdas is None else w * np.asarray(lambdas, dtype=np.float64)[:, None]
    row_max = np.where(mask, x, -np.inf).max(axis=1, keepdims=True)
    e = np.exp(np.where(mask, x - row_max, -np.inf))
    return e / e.sum(axis=1, keepdims=True)


def attention_matrix(logits: CausalLogits) -> np.ndarray:
    return causal_softmax(logits.w)
