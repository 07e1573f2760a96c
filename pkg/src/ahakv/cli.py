"""Experiment runner.

    ahakv verify-bias     [--config PATH] [--seed N] [--trials N] [--out PATH] [--format csv|json]
    ahakv verify-entropy  ...
    ahakv run-toy         ...
    ahakv sweep-sparsity  ...

Exit status: 0 when every check passes, 1 when checks ran but some failed,
2 on invalid input. Auxiliary files are written next to ``--out`` with the
same stem, and the fully resolved config is saved as ``<stem>.config.json``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .attention import ScaleMode
from .cache import run_policy_end_to_end
from .config import EXPERIMENTS, FORMATS, ConfigError, ExperimentConfig, build_config, dump_config, load_file
from .numerics import GaussianParams, LambdaSchedule, lambda_for
from .policies import Policy, PolicyConfig
from .rng import stream
from .stats import (
    bias_metrics,
    ks_to_uniform,
    mc_entropy,
    mc_lognormal,
    mc_score_gap,
    mc_sparsity,
    position_score_matrices,
    position_slope,
)
from .toy_model import ToyModelConfig, build_toy_model, greedy_decode

log = logging.getLogger("ahakv")


def _plain(value):
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, np.bool_)):
        return int(value)
    return value


def format_rows(rows: list[dict], fmt: str) -> str:
    rows = [{k: _plain(v) for k, v in row.items()} for row in rows]
    if fmt == "json":
        return json.dumps(rows, indent=1) + "\n"
    buf = io.StringIO()
    fields = list(rows[0]) if rows else []
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_rows(path: Path, rows: list[dict], fmt: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_rows(rows, fmt))


def sibling(out: Path, tag: str, suffix: str) -> Path:
    return out.with_name(f"{out.stem}.{tag}.{suffix}")


def _policy_config(cfg: ExperimentConfig, budget: int, policy: Policy | str, head_dim: int) -> PolicyConfig:
    schedule = None
    if cfg.lambda_floor is not None:
        schedule = LambdaSchedule(budget_k=budget, head_dim_d=head_dim, floor=cfg.lambda_floor)
    return PolicyConfig.split(
        budget, cfg.recent_budget, policy=policy, lambda_schedule=schedule, pool_kernel=cfg.pool_kernel
    )


def cmd_verify_bias(cfg: ExperimentConfig) -> bool:
    out = Path(cfg.out)
    n, r = cfg.n, cfg.recent_budget
    gap = mc_score_gap(n, cfg.d, cfg.trials, cfg.seed)
    h2o, recent = position_score_matrices(n, cfg.d, r, cfg.trials, cfg.seed)

    def position_rows(matrix):
        se = matrix.std(axis=0, ddof=1) / math.sqrt(matrix.shape[0])
        return [{"position": j, "mean_score": m, "stderr": s} for j, (m, s) in enumerate(zip(matrix.mean(axis=0), se))]

    write_rows(out, position_rows(h2o), cfg.format)
    write_rows(sibling(out, "recent", cfg.format), position_rows(recent), cfg.format)

    h2o_slope, h2o_se = position_slope(h2o)
    body = recent[:, : n - r] if n - r >= 2 else recent
    rec_slope, rec_se = position_slope(body)
    h2o_ok = h2o_slope < 0 and h2o_slope <= -5 * h2o_se
    rec_ok = abs(rec_slope) <= 3 * rec_se
    summary = gap.rows() + [
        {"check": "h2o_slope", "estimate": h2o_slope, "stderr": h2o_se, "trials": cfg.trials,
         "target": "", "rule": "below_zero_se:5", "pass": int(h2o_ok)},
        {"check": "recent_slope", "estimate": rec_slope, "stderr": rec_se, "trials": cfg.trials,
         "target": 0.0, "rule": "within_zero_se:3", "pass": int(rec_ok)},
    ]
    write_rows(sibling(out, "summary", cfg.format), summary, cfg.format)
    return gap.passed and h2o_ok and rec_ok


def cmd_verify_entropy(cfg: ExperimentConfig) -> bool:
    out = Path(cfg.out)
    rows, ok = [], True
    for i in cfg.lengths:
        for lam in cfg.lambdas:
            rep = mc_entropy(i, cfg.d, float(lam), cfg.trials, cfg.seed, ScaleMode.SCALED)
            rows.append(_entropy_row("scaled", i, lam, rep))
            ok &= rep.passed is not False
    # budget calibration: unscaled logits, lambda from the schedule with no floor
    k = cfg.calibration_budget
    for i in cfg.lengths:
        if i <= k:
            continue
        lam = lambda_for(LambdaSchedule(budget_k=k, head_dim_d=cfg.d, floor=0.0), i)
        rep = mc_entropy(i, cfg.d, lam, cfg.trials, cfg.seed, ScaleMode.UNSCALED, rel_tol=0.10)
        rows.append(_entropy_row(f"calibrated_k{k}", i, lam, rep))
        ok &= rep.passed is not False
    write_rows(out, rows, cfg.format)

    lognormal_rows = []
    for mu, sigma2 in cfg.lognormal_params:
        params = GaussianParams(float(mu), float(sigma2))
        for name, rep in zip(("E[e^x]", "E[x e^x]"), mc_lognormal(params, cfg.lognormal_trials, cfg.seed)):
            lognormal_rows.append({"mu": params.mu, "sigma2": params.sigma2, **rep.as_row(name)})
            ok &= bool(rep.passed)
    write_rows(sibling(out, "lognormal", cfg.format), lognormal_rows, cfg.format)
    return ok


def _entropy_row(mode, i, lam, rep):
    return {
        "mode": mode,
        "i": i,
        "lambda": float(lam),
        "empirical_H": rep.estimate,
        "target_H": rep.target,
        "stderr": rep.std_error,
        "pass": "" if rep.passed is None else int(rep.passed),
    }


def cmd_run_toy(cfg: ExperimentConfig) -> bool:
    out = Path(cfg.out)
    model_cfg = ToyModelConfig(cfg.vocab, cfg.layers, cfg.heads, cfg.head_dim, cfg.mlp_mult, cfg.seed)
    model = build_toy_model(model_cfg)
    prompt = stream(cfg.seed, "prompt").integers(0, cfg.vocab, cfg.n)
    length = cfg.n + cfg.steps

    reference = greedy_decode(model, prompt, cfg.steps)
    metrics, token_rows, ok = [], [], True
    ratios: dict[tuple[str, int], float] = {}
    for budget in cfg.budgets:
        for name in cfg.policies:
            pcfg = _policy_config(cfg, budget, name, cfg.head_dim)
            tokens, trace = run_policy_end_to_end(model, prompt, cfg.steps, pcfg)
            trace.write(sibling(out, f"trace.{name}.B{budget}", "tsv"))
            token_rows += [{"policy": name, "budget": budget, "step": s, "token": t} for s, t in enumerate(tokens)]
            ratio, ks, size_ok = _trace_metrics(trace, cfg, budget)
            ratios[name, budget] = ratio
            metrics.append({
                "policy": name,
                "budget": budget,
                "mean_index_ratio": ratio,
                "ks_to_uniform": ks,
                "budget_ok": int(size_ok),
                "matches_full": int(tokens == reference),
            })
            ok &= size_ok or name == Policy.FULL.value
    for row in metrics:
        if row["policy"] != Policy.FULL.value and row["budget"] >= length and row["matches_full"] == 0:
            ok = False
    for budget in cfg.budgets:
        aha, h2o = ratios.get(("aha", budget)), ratios.get(("h2o", budget))
        if budget < cfg.n and aha is not None:
            ok &= 0.40 <= aha <= 0.60
            if h2o is not None:
                ok &= h2o < aha
    write_rows(out, metrics, cfg.format)
    write_rows(sibling(out, "tokens", cfg.format), token_rows, cfg.format)
    return ok


def _trace_metrics(trace, cfg: ExperimentConfig, budget: int) -> tuple[float, float, bool]:
    """Mean index ratio and KS (averaged over heads) of the prefill snapshot, plus the budget check."""
    first = trace.records[0] if trace.records else None
    size_ok = all(len(kept) <= budget for rec in trace.records for kept in rec.retained.values())
    if first is None:
        return float("nan"), float("nan"), size_ok
    per_head = [bias_metrics(kept, cfg.n) for kept in first.retained.values()]
    ratio = float(np.mean([m.mean_retained_index_ratio for m in per_head]))
    body = [np.array(k)[np.array(k) < cfg.n - cfg.recent_budget] for k in first.retained.values()]
    ks = float(np.mean([ks_to_uniform(b, cfg.n - cfg.recent_budget) if b.size else 0.0 for b in body]))
    return ratio, ks, size_ok


def cmd_sweep_sparsity(cfg: ExperimentConfig) -> bool:
    out = Path(cfg.out)
    thresholds = np.linspace(0.0, cfg.threshold_max, cfg.num_thresholds)
    pcfg = _policy_config(cfg, cfg.total_budget, Policy.AHA, cfg.d)
    result = mc_sparsity(cfg.n, cfg.d, pcfg, thresholds, cfg.trials, cfg.seed)
    rows = [
        {"threshold": t, "frac_plain": p, "frac_refined": q}
        for t, p, q in zip(thresholds, result.plain.mean(axis=0), result.refined.mean(axis=0))
    ]
    write_rows(out, rows, cfg.format)
    dominated = result.dominated_fraction()
    seed_rows = [{"trial": t, "dominated_fraction": f, "pass": int(f >= 0.9)} for t, f in enumerate(dominated)]
    write_rows(sibling(out, "seeds", cfg.format), seed_rows, cfg.format)
    return float((dominated >= 0.9).mean()) >= 0.9


COMMANDS = {
    "verify-bias": cmd_verify_bias,
    "verify-entropy": cmd_verify_entropy,
    "run-toy": cmd_run_toy,
    "sweep-sparsity": cmd_sweep_sparsity,
}


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ahakv", description="KV-cache eviction verification runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=_u64)
        p.add_argument("--trials", type=int)
        p.add_argument("--out", type=str)
        p.add_argument("--format", choices=FORMATS)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        file_values = load_file(args.config) if args.config else {}
        overrides = {"seed": args.seed, "trials": args.trials, "out": args.out, "format": args.format}
        cfg = build_config(args.command, file_values, overrides)
    except (ConfigError, OSError) as exc:
        print(f"ahakv: invalid input: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, sibling(out, "config", "json"))
    log.info("running %s -> %s", cfg.experiment, out)
    passed = COMMANDS[cfg.experiment](cfg)
    log.info("%s: %s", cfg.experiment, "pass" if passed else "FAIL")
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(main())
