"""Scalar and vector primitives shared by the scoring and verification code.

Everything here is a pure function of its arguments and works in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LambdaSchedule:
    """Length-dependent logit scale for step-gain softmax.

    ``lambda_for`` returns ``max(floor, sqrt(2 ln(i / budget_k) / head_dim_d))``
    with the log term clamped at zero for ``i <= budget_k``. ``floor`` defaults
    to ``1/sqrt(head_dim_d)``. Setting ``fixed`` bypasses the schedule and
    returns that constant for every ``i`` (used for ablations).
    """

    budget_k: int
    head_dim_d: int
    floor: float | None = None
    fixed: float | None = None

    def __post_init__(self):
        if self.budget_k < 1 or self.head_dim_d < 1:
            raise ValueError("budget_k and head_dim_d must be >= 1")
        if self.floor is not None and not (math.isfinite(self.floor) and self.floor >= 0):
            raise ValueError(f"floor must be finite and >= 0, got {self.floor}")
        if self.fixed is not None and not (math.isfinite(self.fixed) and self.fixed >= 0):
            raise ValueError(f"fixed lambda must be finite and >= 0, got {self.fixed}")

    @property
    def effective_floor(self) -> float:
        if self.floor is None:
            return 1.0 / math.sqrt(self.head_dim_d)
        return self.floor


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")


def _as_row(row) -> np.ndarray:
    x = np.asarray(row, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("expected a nonempty 1-D row")
    if not np.all(np.isfinite(x)):
        raise ValueError("row contains non-finite values")
    return x


def softmax(row) -> np.ndarray:
    x = _as_row(row)
    e = np.exp(x - x.max())
    return e / e.sum()


def sg_softmax(row, lam: float) -> np.ndarray:
    """Softmax of ``lam * row``; ``lam = 0`` gives the uniform distribution."""
    if not (math.isfinite(lam) and lam >= 0):
        raise ValueError(f"lambda must be finite and >= 0, got {lam}")
    return softmax(lam * _as_row(row))


def row_entropy(p) -> float:
    """Shannon entropy in nats, with 0 log 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    # rounding can push a one-hot row a hair below zero
    return max(h, 0.0)


def lambda_for(schedule: LambdaSchedule, i: int) -> float:
    if i < 1:
        raise ValueError(f"i must be >= 1, got {i}")
    if schedule.fixed is not None:
        return schedule.fixed
    radicand = 2.0 * math.log(i / schedule.budget_k) / schedule.head_dim_d
    return max(schedule.effective_floor, math.sqrt(max(radicand, 0.0)))


def lambda_schedule_array(schedule: LambdaSchedule, counts) -> np.ndarray:
    """Vectorised ``lambda_for`` over an array of token counts."""
    counts = np.asarray(counts, dtype=np.float64)
    if schedule.fixed is not None:
        return np.full(counts.shape, schedule.fixed)
    radicand = 2.0 * np.log(counts / schedule.budget_k) / schedule.head_dim_d
    return np.maximum(schedule.effective_floor, np.sqrt(np.maximum(radicand, 0.0)))


def expected_entropy(i: int, sigma2_logit: float) -> float:
    """Large-row approximation of mean attention entropy: ``ln i - sigma2/2``.

    Only meaningful while the result stays well above zero; it goes negative
    for large logit variance even though entropy cannot.
    """
    if i < 1:
        raise ValueError(f"i must be >= 1, got {i}")
    return math.log(i) - sigma2_logit / 2.0


def lognormal_mean(p: GaussianParams) -> float:
    """E[e^x] for x ~ N(mu, sigma2)."""
    return math.exp(p.mu + p.sigma2 / 2.0)


def lognormal_xexp_mean(p: GaussianParams) -> float:
    """E[x e^x] for x ~ N(mu, sigma2)."""
    return math.exp(p.mu + p.sigma2 / 2.0) * (p.mu + p.sigma2)


def avgpool_1d(v, kernel: int = 7) -> np.ndarray:
    """Centered moving average with edge-replicate padding; output has len(v)."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be an odd positive integer, got {kernel}")
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("expected a nonempty 1-D vector")
    if kernel == 1:
        return x.copy()
    half = kernel // 2
    padded = np.pad(x, half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel)
    out = windows.mean(axis=1)
    # keep the range bound exact under rounding
    return np.clip(out, x.min(), x.max())
