"""Monte Carlo checks of the statistical claims behind the eviction scores.

Every estimator draws trial ``t`` from its own ``(seed, ..., t)`` stream, so
results do not depend on evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import ScaleMode, SynthConfig, causal_logits, causal_softmax, gaussian_qkv
from .cache import prefill
from .numerics import GaussianParams, lognormal_mean, lognormal_xexp_mean, sg_softmax
from .policies import Policy, PolicyConfig, h2o_scores, refine_scores, sg_recent_scores, value_prior
from .rng import stream


@dataclass(frozen=True)
class Rule:
    """Pass rule for an :class:`McReport`.

    kinds: ``within_se`` (|est - target| <= tol * se), ``below_zero_se``
    (est <= -tol * se), ``within_zero_se`` (|est| <= tol * se), ``rel``
    (|est - target| <= tol * |target|), ``abs`` (|est - target| <= tol) and
    ``none`` (reported without judgement).
    """

    kind: str
    tol: float = 0.0

    def __str__(self):
        return self.kind if self.kind == "none" else f"{self.kind}:{self.tol:g}"


NO_RULE = Rule("none")
# absorbs rounding when the standard error is exactly zero
_EXACT = 1e-12


@dataclass(frozen=True)
class McReport:
    estimate: float
    std_error: float
    trials: int
    target: float | None = None
    rule: Rule = NO_RULE

    @property
    def passed(self) -> bool | None:
        return judge(self.estimate, self.std_error, self.target, self.rule)

    def as_row(self, name: str) -> dict:
        return {
            "check": name,
            "estimate": self.estimate,
            "stderr": self.std_error,
            "trials": self.trials,
            "target": "" if self.target is None else self.target,
            "rule": str(self.rule),
            "pass": "" if self.passed is None else int(self.passed),
        }


def judge(estimate: float, std_error: float, target: float | None, rule: Rule) -> bool | None:
    kind, tol = rule.kind, rule.tol
    if kind == "none":
        return None
    if kind == "below_zero_se":
        return estimate <= -tol * std_error and estimate < 0
    if kind == "within_zero_se":
        return abs(estimate) <= tol * std_error + _EXACT
    if target is None:
        raise ValueError(f"rule {rule} needs a target")
    err = abs(estimate - target)
    if kind == "within_se":
        return err <= tol * std_error + _EXACT * max(1.0, abs(target))
    if kind == "rel":
        return err <= tol * abs(target)
    if kind == "abs":
        return err <= tol
    raise ValueError(f"unknown rule kind {kind!r}")


def mean_se(samples) -> tuple[float, float]:
    """Sample mean and std error (ddof=1 std over sqrt(count))."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def report(samples, target=None, rule: Rule = NO_RULE) -> McReport:
    est, se = mean_se(samples)
    return McReport(est, se, int(np.size(samples)), target, rule)


def mid_range(n: int) -> tuple[int, int]:
    """Inclusive 0-based range of ``j`` pooled for gap statistics, ``[n/4, 3n/4]``
    clipped so that ``j + 1`` stays in range."""
    lo = min(n // 4, n - 2)
    hi = max(min(3 * n // 4, n - 2), lo)
    return lo, hi


@dataclass(frozen=True)
class ScoreGapReport:
    gap: McReport
    neg_diag: McReport
    agreement: McReport
    gap_full: McReport
    neg_diag_full: McReport

    def rows(self) -> list[dict]:
        return [
            self.gap.as_row("score_gap_mid"),
            self.neg_diag.as_row("neg_diag_mid"),
            self.agreement.as_row("gap_plus_diag_mid"),
            self.gap_full.as_row("score_gap_full"),
            self.neg_diag_full.as_row("neg_diag_full"),
        ]

    @property
    def passed(self) -> bool:
        return bool(self.gap.passed and self.agreement.passed)


def _synthetic_attention(n: int, d: int, seed: int, trial: int) -> tuple[np.ndarray, np.ndarray]:
    qkv = gaussian_qkv(SynthConfig(n, d, seed), "trial", trial)
    return causal_softmax(causal_logits(qkv.q, qkv.k).w), qkv.v


def mc_score_gap(n: int, d: int, trials: int, seed: int) -> ScoreGapReport:
    """Mean accumulated-score gap ``S[j+1] - S[j]`` against ``-a[j, j]``.

    Both are pooled over the mid range of ``j`` (and separately over all
    ``j``); ``agreement`` is the paired per-trial difference
    ``gap - (-diag)``, whose expectation is zero.
    """
    if n < 2 or trials < 2:
        raise ValueError("need n >= 2 and trials >= 2")
    lo, hi = mid_range(n)
    gaps, diags, gaps_full, diags_full = [], [], [], []
    for t in range(trials):
        attn, _ = _synthetic_attention(n, d, seed, t)
        step = np.diff(h2o_scores(attn))
        diag = np.diag(attn)[:-1]
        gaps.append(step[lo : hi + 1].mean())
        diags.append(diag[lo : hi + 1].mean())
        gaps_full.append(step.mean())
        diags_full.append(diag.mean())
    gaps, diags = np.array(gaps), np.array(diags)
    return ScoreGapReport(
        gap=report(gaps, rule=Rule("below_zero_se", 5.0)),
        neg_diag=report(-diags),
        agreement=report(gaps + diags, target=0.0, rule=Rule("within_se", 3.0)),
        gap_full=report(gaps_full, target=-float(np.mean(diags_full)), rule=NO_RULE),
        neg_diag_full=report(-np.array(diags_full)),
    )


def position_score_matrices(n: int, d: int, r: int, trials: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial H2O and recent-accumulation scores, each of shape (trials, n)."""
    h2o = np.empty((trials, n))
    recent = np.empty((trials, n))
    for t in range(trials):
        attn, _ = _synthetic_attention(n, d, seed, t)
        h2o[t] = attn.sum(axis=0)
        recent[t] = attn[-r:].sum(axis=0)
    return h2o, recent


def position_slope(score_matrix) -> tuple[float, float]:
    """Least-squares slope of score vs position, averaged over trials, with std error."""
    m = np.atleast_2d(np.asarray(score_matrix, dtype=np.float64))
    x = np.arange(m.shape[1], dtype=np.float64)
    xc = x - x.mean()
    slopes = (m - m.mean(axis=1, keepdims=True)) @ xc / (xc @ xc)
    return mean_se(slopes)


@dataclass(frozen=True)
class BiasMetrics:
    mean_retained_index_ratio: float
    ks_to_uniform: float
    slope_of_position_means: float | None = None
    slope_std_error: float | None = None


def ks_to_uniform(indices, n: int) -> float:
    """KS distance between the indices and the continuous uniform law on [0, n-1]."""
    x = np.sort(np.asarray(indices, dtype=np.float64)) / max(n - 1, 1)
    m = x.size
    i = np.arange(1, m + 1)
    return float(max((i / m - x).max(), (x - (i - 1) / m).max()))


def bias_metrics(retained, n: int, position_scores=None) -> BiasMetrics:
    idx = np.asarray(retained)
    if idx.size == 0 or n < 1:
        raise ValueError("need a nonempty retained set and n >= 1")
    ratio = float(idx.mean() / max(n - 1, 1))
    slope = se = None
    if position_scores is not None:
        slope, se = position_slope(position_scores)
    return BiasMetrics(ratio, ks_to_uniform(idx, n), slope, se)


def mc_entropy(
    i: int,
    d: int,
    lam: float,
    trials: int,
    seed: int,
    scale_mode: ScaleMode | str = ScaleMode.SCALED,
    rel_tol: float = 0.05,
) -> McReport:
    """Mean entropy of ``sg_softmax`` over rows of ``i`` i.i.d. Gaussian logits.

    Logits have variance 1 (scaled) or ``d`` (unscaled). The target uses the
    pooled empirical logit variance. Judged at ``rel_tol`` only when the target
    is at least ``ln(i) / 2``; outside that regime the approximation is not
    expected to hold and the report carries no verdict.
    """
    if i < 2:
        raise ValueError(f"i must be >= 2, got {i}")
    std = 1.0 if ScaleMode(scale_mode) is ScaleMode.SCALED else math.sqrt(d)
    entropies = np.empty(trials)
    sq_sum, count = 0.0, 0
    for t in range(trials):
        w = std * stream(seed, "entropy", i, t).standard_normal(i)
        p = sg_softmax(w, lam)
        nz = p[p > 0]
        entropies[t] = -(nz * np.log(nz)).sum()
        sq_sum += float(((w - w.mean()) ** 2).sum())
        count += i - 1
    sigma2_hat = sq_sum / count
    target = math.log(i) - lam**2 * sigma2_hat / 2.0
    rule = Rule("rel", rel_tol) if target >= math.log(i) / 2 else NO_RULE
    est, se = mean_se(entropies)
    return McReport(est, se, trials, target, rule)


def mc_lognormal(p: GaussianParams, trials: int, seed: int, chunk: int = 1 << 18) -> tuple[McReport, McReport]:
    """MC estimates of E[e^x] and E[x e^x] for x ~ N(mu, sigma2), judged at 3 std errors."""
    if trials < 2:
        raise ValueError("trials must be >= 2")
    rng = stream(seed, "lognormal", p.mu, p.sigma2)
    sums = np.zeros(2)
    sq = np.zeros(2)
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        x = p.mu + math.sqrt(p.sigma2) * rng.standard_normal(size)
        ex = np.exp(x)
        for j, s in enumerate((ex, x * ex)):
            sums[j] += s.sum()
            sq[j] += (s * s).sum()
        done += size
    means = sums / trials
    var = np.maximum(sq / trials - means**2, 0.0) * trials / (trials - 1)
    se = np.sqrt(var / trials)
    rule = Rule("within_se", 3.0)
    return (
        McReport(float(means[0]), float(se[0]), trials, lognormal_mean(p), rule),
        McReport(float(means[1]), float(se[1]), trials, lognormal_xexp_mean(p), rule),
    )


def retention_ratio_curve(scores, refined_scores, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of tokens whose max-normalised score is >= each threshold."""
    th = np.asarray(thresholds, dtype=np.float64)

    def curve(s):
        s = np.asarray(s, dtype=np.float64)
        top = s.max()
        norm = s / top if top > 0 else np.ones_like(s)
        return (norm[None, :] >= th[:, None]).mean(axis=1)

    s, rs = np.asarray(scores), np.asarray(refined_scores)
    if s.shape != rs.shape:
        raise ValueError("score vectors must have equal length")
    return curve(s), curve(rs)


@dataclass(frozen=True)
class SparsityResult:
    thresholds: np.ndarray
    plain: np.ndarray  # (seeds, thresholds)
    refined: np.ndarray

    def dominated_fraction(self) -> np.ndarray:
        """Per seed, the fraction of thresholds where refined <= plain."""
        return (self.refined <= self.plain).mean(axis=1)


def mc_sparsity(n: int, d: int, cfg: PolicyConfig, thresholds, seeds: int, seed: int) -> SparsityResult:
    """Retention curves of adaptive scores with and without the value prior."""
    th = np.asarray(thresholds, dtype=np.float64)
    plain = np.empty((seeds, th.size))
    refined = np.empty((seeds, th.size))
    r = min(cfg.recent_budget, n)
    sched = cfg.schedule_for(d)
    for t in range(seeds):
        qkv = gaussian_qkv(SynthConfig(n, d, seed), "trial", t)
        # only the last r logit rows are needed
        w = np.zeros((n, n))
        w[-r:] = np.tril(qkv.q[-r:] @ qkv.k.T, k=n - r) / math.sqrt(d)
        s = sg_recent_scores(w, r, sched)
        rs = refine_scores(s, value_prior(qkv.v, cfg.pool_kernel))
        plain[t], refined[t] = retention_ratio_curve(s, rs, th)
    return SparsityResult(th, plain, refined)


@dataclass(frozen=True)
class RetentionComparison:
    """Per-seed bias metrics for two policies on the same synthetic heads."""

    policies: tuple[str, ...]
    ratio: np.ndarray  # (policies, seeds)
    ks: np.ndarray  # KS on the non-recent part of the retained set


def retention_experiment(
    n: int, d: int, budget: int, recent: int, seeds: int, seed: int, policies=(Policy.AHA, Policy.H2O)
) -> RetentionComparison:
    policies = tuple(Policy(p) for p in policies)
    ratio = np.empty((len(policies), seeds))
    ks = np.empty((len(policies), seeds))
    for t in range(seeds):
        qkv = gaussian_qkv(SynthConfig(n, d, seed), "trial", t)
        for pi, pol in enumerate(policies):
            cfg = PolicyConfig.split(budget, recent, policy=pol)
            kept = prefill(qkv, cfg).indices
            ratio[pi, t] = bias_metrics(kept, n).mean_retained_index_ratio
            body = kept[kept < n - recent]
            ks[pi, t] = ks_to_uniform(body, n - recent) if body.size else 0.0
    return RetentionComparison(tuple(p.value for p in policies), ratio, ks)
