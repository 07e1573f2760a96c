"""Eviction scores and retained-set selection.

Score vectors are plain float64 arrays indexed by token position; retained
sets are sorted int64 arrays of token indices. Ties always favour the lower
index.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .attention import CausalLogits, causal_softmax
from .numerics import LambdaSchedule, avgpool_1d, lambda_schedule_array


class Policy(str, Enum):
    FULL = "full"
    SINK = "sink"
    H2O = "h2o"
    RECENT_ACCUM = "recent_accum"
    AHA = "aha"


@dataclass(frozen=True)
class ValuePrior:
    gamma_bar: np.ndarray
    kernel: int


@dataclass(frozen=True)
class PolicyConfig:
    """Budget split ``total_budget = recent_budget + selected_budget``.

    ``lambda_schedule`` defaults to the step-gain schedule with ``k`` bound to
    the total budget; it needs the head dimension, so it is filled in lazily by
    :meth:`schedule_for`.
    """

    total_budget: int
    recent_budget: int
    selected_budget: int
    policy: Policy = Policy.AHA
    lambda_schedule: LambdaSchedule | None = None
    pool_kernel: int = 7
    sink_tokens: int = 4

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if self.recent_budget < 1:
            raise ValueError(f"recent_budget must be >= 1, got {self.recent_budget}")
        if self.selected_budget < 0:
            raise ValueError(f"selected_budget must be >= 0, got {self.selected_budget}")
        if self.total_budget != self.recent_budget + self.selected_budget:
            raise ValueError(
                f"total_budget ({self.total_budget}) must equal recent_budget + selected_budget "
                f"({self.recent_budget} + {self.selected_budget})"
            )
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ValueError(f"pool_kernel must be odd and >= 1, got {self.pool_kernel}")
        if self.sink_tokens < 0:
            raise ValueError("sink_tokens must be >= 0")

    @classmethod
    def split(cls, total_budget: int, recent_budget: int, **kwargs) -> "PolicyConfig":
        return cls(total_budget, recent_budget, total_budget - recent_budget, **kwargs)

    def schedule_for(self, head_dim: int) -> LambdaSchedule:
        if self.lambda_schedule is not None:
            return self.lambda_schedule
        return LambdaSchedule(budget_k=self.total_budget, head_dim_d=head_dim)

    @property
    def sink_split(self) -> tuple[int, int]:
        """(initial tokens, recent window) used by the sink baseline within the budget."""
        n_init = min(self.sink_tokens, self.selected_budget)
        return n_init, self.total_budget - n_init


def _check_r(r: int, n: int):
    if r < 1 or r > n:
        raise ValueError(f"r must satisfy 1 <= r <= n ({n}), got {r}")


def h2o_scores(attn) -> np.ndarray:
    """Column sums of the full causal attention matrix."""
    return np.asarray(attn, dtype=np.float64).sum(axis=0)


def recent_accum_scores(attn, r: int) -> np.ndarray:
    """Column sums over the last ``r`` attention rows only."""
    attn = np.asarray(attn, dtype=np.float64)
    _check_r(r, attn.shape[0])
    return attn[-r:].sum(axis=0)


def sg_recent_rows(logits: CausalLogits | np.ndarray, r: int, sched: LambdaSchedule) -> np.ndarray:
    """The last ``r`` rows of the step-gain attention matrix, shape (r, n)."""
    w = logits.w if isinstance(logits, CausalLogits) else np.asarray(logits, dtype=np.float64)
    n = w.shape[0]
    _check_r(r, n)
    counts = np.arange(n - r + 1, n + 1)
    return causal_softmax(w[-r:], lambda_schedule_array(sched, counts))


def sg_recent_scores(logits: CausalLogits | np.ndarray, r: int, sched: LambdaSchedule) -> np.ndarray:
    """Recent accumulation of step-gain softmax rows; row ``i`` uses lambda(i + 1)."""
    return sg_recent_rows(logits, r, sched).sum(axis=0)


def value_prior(v, kernel: int = 7) -> ValuePrior:
    v = np.asarray(v, dtype=np.float64)
    norms2 = np.einsum("ij,ij->i", v, v)
    gamma = avgpool_1d(norms2, kernel)
    top = gamma.max()
    if top <= 0:
        return ValuePrior(np.ones_like(gamma), kernel)
    return ValuePrior(gamma / top, kernel)


def refine_scores(s, prior: ValuePrior) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != prior.gamma_bar.shape:
        raise ValueError(f"length mismatch: scores {s.shape} vs prior {prior.gamma_bar.shape}")
    return prior.gamma_bar * s


def top_k_indices(scores, candidates, k: int) -> np.ndarray:
    """The ``k`` highest-scoring ``candidates``, ties toward the lower index, sorted."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if k <= 0 or candidates.size == 0:
        return np.empty(0, dtype=np.int64)
    if k >= candidates.size:
        return np.sort(candidates)
    s = np.asarray(scores, dtype=np.float64)[candidates]
    # lexsort: last key is primary
    order = np.lexsort((candidates, -s))
    return np.sort(candidates[order[:k]])


def select_retained(s, n: int, cfg: PolicyConfig, recent_budget: int | None = None) -> np.ndarray:
    """Recent window plus the top ``selected_budget`` of the remaining tokens.

    ``recent_budget`` overrides ``cfg.recent_budget`` (0 is allowed here, for
    tests of the top-k part on its own).
    """
    br = cfg.recent_budget if recent_budget is None else recent_budget
    if n <= br + cfg.selected_budget:
        return np.arange(n, dtype=np.int64)
    recent_start = n - min(br, n)
    chosen = top_k_indices(s, np.arange(recent_start), cfg.selected_budget)
    return np.concatenate([chosen, np.arange(recent_start, n, dtype=np.int64)])


def sink_retained(n: int, n_init: int = 4, recent: int = 4) -> np.ndarray:
    head = np.arange(min(n_init, n))
    tail = np.arange(n - min(recent, n), n)
    return np.union1d(head, tail).astype(np.int64)


def last_query_retained(attn, cfg: PolicyConfig) -> np.ndarray:
    """Keep the tokens the final query attends to most (a TOVA-style baseline)."""
    attn = np.asarray(attn, dtype=np.float64)
    return select_retained(attn[-1], attn.shape[0], cfg)
