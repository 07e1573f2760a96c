"""Per-head cache state machine: prefill selection, then one update per generated token."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import QkvSet, causal_logits, causal_softmax
from .numerics import lambda_for, sg_softmax, softmax
from .policies import (
    Policy,
    PolicyConfig,
    h2o_scores,
    refine_scores,
    select_retained,
    sg_recent_scores,
    sink_retained,
    top_k_indices,
    value_prior,
)
from .toy_model import ToyModel, greedy_decode


@dataclass(frozen=True)
class HeadCacheState:
    """Retained keys/values for one head, aligned with their token indices and scores."""

    keys: np.ndarray
    values: np.ndarray
    indices: np.ndarray
    scores: np.ndarray
    length: int
    step: int = 0

    def __post_init__(self):
        m = self.indices.size
        if not (self.keys.shape[0] == self.values.shape[0] == self.scores.size == m):
            raise ValueError("keys, values, indices and scores must have matching lengths")


def prefill_scores(qkv: QkvSet, cfg: PolicyConfig) -> np.ndarray:
    """Eviction scores over the prompt under ``cfg.policy`` (zeros for static policies)."""
    n = qkv.n
    if cfg.policy in (Policy.FULL, Policy.SINK):
        return np.zeros(n)
    logits = causal_logits(qkv.q, qkv.k)
    r = min(cfg.recent_budget, n)
    if cfg.policy is Policy.H2O:
        return h2o_scores(causal_softmax(logits.w))
    if cfg.policy is Policy.RECENT_ACCUM:
        return causal_softmax(logits.w[-r:]).sum(axis=0)
    scores = sg_recent_scores(logits, r, cfg.schedule_for(qkv.d))
    return refine_scores(scores, value_prior(qkv.v, cfg.pool_kernel))


def prefill(qkv: QkvSet, cfg: PolicyConfig) -> HeadCacheState:
    n = qkv.n
    scores = prefill_scores(qkv, cfg)
    if cfg.policy is Policy.FULL:
        kept = np.arange(n)
    elif cfg.policy is Policy.SINK:
        kept = sink_retained(n, *cfg.sink_split)
    else:
        kept = select_retained(scores, n, cfg)
    return HeadCacheState(
        keys=qkv.k[kept].copy(),
        values=qkv.v[kept].copy(),
        indices=kept.astype(np.int64),
        scores=scores[kept].copy(),
        length=n,
    )


def _reselect(state_indices: np.ndarray, scores: np.ndarray, cfg: PolicyConfig) -> np.ndarray:
    """Positions (into the retained arrays) to keep after appending one token."""
    m = state_indices.size
    if cfg.policy is Policy.FULL or m <= cfg.total_budget:
        return np.arange(m)
    if cfg.policy is Policy.SINK:
        n_init, recent = cfg.sink_split
        return np.concatenate([np.arange(n_init), np.arange(m - recent, m)])
    recent_start = m - cfg.recent_budget
    # positions are ordered like token indices, so position ties = index ties
    chosen = top_k_indices(scores, np.arange(recent_start), cfg.selected_budget)
    return np.concatenate([chosen, np.arange(recent_start, m)])


def generation_step(state: HeadCacheState, new_q, new_k, new_v, cfg: PolicyConfig):
    """Append one token, attend over the retained cache, update scores, evict.

    Returns ``(new_state, attention_output)``. The output always uses the
    standard softmax; step-gain scaling only feeds the eviction scores.
    """
    new_q, new_k, new_v = (np.asarray(x, dtype=np.float64) for x in (new_q, new_k, new_v))
    d = state.keys.shape[1]
    if new_q.shape != (d,) or new_k.shape != (d,) or new_v.shape != (d,):
        raise ValueError(f"expected d-vectors with d={d}")
    position = state.length
    keys = np.vstack([state.keys, new_k])
    values = np.vstack([state.values, new_v])
    indices = np.append(state.indices, position)
    scores = np.append(state.scores, 0.0)

    logits = keys @ new_q / math.sqrt(d)
    probs = softmax(logits)
    output = probs @ values
    if cfg.policy in (Policy.H2O, Policy.RECENT_ACCUM):
        scores = scores + probs
    elif cfg.policy is Policy.AHA:
        lam = lambda_for(cfg.schedule_for(d), position + 1)
        scores = scores + sg_softmax(logits, lam)

    keep = _reselect(indices, scores, cfg)
    new_state = HeadCacheState(
        keys=keys[keep],
        values=values[keep],
        indices=indices[keep],
        scores=scores[keep],
        length=position + 1,
        step=state.step + 1,
    )
    return new_state, output


def evicted_indices(before: HeadCacheState, after: HeadCacheState) -> np.ndarray:
    candidates = np.append(before.indices, before.length)
    return np.setdiff1d(candidates, after.indices)


@dataclass
class StepRecord:
    step: int
    token: int
    retained: dict[str, tuple[int, ...]]
    evicted: dict[str, int | None]


@dataclass
class GenerationTrace:
    records: list[StepRecord] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = []
        for rec in self.records:
            for head_id, kept in rec.retained.items():
                out.append(f"{rec.step}\t{rec.token}\t{head_id}\t{','.join(map(str, kept))}")
        return out

    def dumps(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8", newline="\n")

    @classmethod
    def loads(cls, text: str) -> "GenerationTrace":
        """Rebuild a trace from its text form; evictions are recovered by diffing snapshots."""
        trace = cls()
        prev: dict[str, set[int]] = {}
        for line in text.splitlines():
            if not line:
                continue
            step_s, token_s, head_id, kept_s = line.split("\t")
            step, token = int(step_s), int(token_s)
            kept = tuple(int(x) for x in kept_s.split(",")) if kept_s else ()
            if not trace.records or trace.records[-1].step != step:
                trace.records.append(StepRecord(step, token, {}, {}))
            rec = trace.records[-1]
            rec.retained[head_id] = kept
            gone = sorted(prev.get(head_id, set()) - set(kept))
            rec.evicted[head_id] = gone[0] if gone else None
            prev[head_id] = set(kept)
        return trace

    @classmethod
    def read(cls, path: str | Path) -> "GenerationTrace":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def head_id(layer: int, head: int) -> str:
    return f"{layer}.{head}"


class PolicyCache:
    """Cache hook for :func:`greedy_decode` that keeps one :class:`HeadCacheState` per head."""

    def __init__(self, cfg: PolicyConfig):
        self.cfg = cfg
        self.states: dict[tuple[int, int], HeadCacheState] = {}
        self.last_evicted: dict[tuple[int, int], int | None] = {}

    def prefill(self, layer, head, q, k, v):
        self.states[layer, head] = prefill(QkvSet(q, k, v), self.cfg)
        self.last_evicted[layer, head] = None

    def step(self, layer, head, q, k, v):
        before = self.states[layer, head]
        after, output = generation_step(before, q, k, v, self.cfg)
        gone = evicted_indices(before, after)
        self.states[layer, head] = after
        self.last_evicted[layer, head] = int(gone[0]) if gone.size else None
        return output

    def snapshot(self) -> StepRecord:
        keys = sorted(self.states)
        return StepRecord(
            step=-1,
            token=-1,
            retained={head_id(*key): tuple(int(i) for i in self.states[key].indices) for key in keys},
            evicted={head_id(*key): self.last_evicted[key] for key in keys},
        )


def run_policy_end_to_end(model: ToyModel, prompt, steps: int, cfg: PolicyConfig):
    """Greedy decode under ``cfg``; returns ``(tokens, trace)`` with one record per emitted token."""
    cache = PolicyCache(cfg)
    trace = GenerationTrace()

    def record(step, token):
        rec = cache.snapshot()
        rec.step, rec.token = step, token
        trace.records.append(rec)

    tokens = greedy_decode(model, prompt, steps, cache=cache, on_token=record)
    return tokens, trace
