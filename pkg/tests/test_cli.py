import csv
import json
import math

import pytest

from ahakv.cli import main
from ahakv.cache import GenerationTrace


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(args):
    return main([str(a) for a in args])


def write_config(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_verify_bias_small(tmp_path):
    cfg = write_config(tmp_path, "bias.yaml", "n: 128\nd: 16\nrecent_budget: 16\n")
    out = tmp_path / "bias.csv"
    assert run(["verify-bias", "--config", cfg, "--trials", 40, "--out", out]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["position", "mean_score", "stderr"]
    assert len(rows) == 128
    raw = out.read_bytes()
    assert b"\r" not in raw
    summary = read_csv(tmp_path / "bias.summary.csv")
    assert {r["check"] for r in summary} >= {"score_gap_mid", "gap_plus_diag_mid", "h2o_slope", "recent_slope"}
    resolved = json.loads((tmp_path / "bias.config.json").read_text())
    assert resolved["trials"] == 40 and resolved["n"] == 128


def test_verify_bias_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, "bias.yaml", "n: 64\nd: 8\nrecent_budget: 8\ntrials: 10\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run(["verify-bias", "--config", cfg, "--seed", 9, "--out", a])
    run(["verify-bias", "--config", cfg, "--seed", 9, "--out", b])
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.summary.csv").read_bytes() == (tmp_path / "b.summary.csv").read_bytes()


def exit_code(args):
    try:
        return run(args)
    except SystemExit as exc:
        return exc.code


@pytest.mark.parametrize(
    "args",
    [
        ["verify-bias", "--trials", 0],
        ["verify-entropy", "--trials", -3],
        ["run-toy", "--seed", -1],
        ["sweep-sparsity", "--format", "xml"],
        ["verify-bias", "--trials", "many"],
    ],
)
def test_invalid_input_exits_2(tmp_path, args):
    assert exit_code(args + ["--out", tmp_path / "x.csv"]) == 2


def test_invalid_config_values_exit_2(tmp_path, capsys):
    out = tmp_path / "x.csv"
    assert run(["verify-bias", "--trials", 0, "--out", out]) == 2
    assert "trials" in capsys.readouterr().err
    bad = write_config(tmp_path, "bad.yaml", "n: 64\nbogus_key: 1\n")
    assert run(["verify-bias", "--config", bad, "--out", out]) == 2
    assert "bogus_key" in capsys.readouterr().err
    wrong = write_config(tmp_path, "wrong.yaml", "experiment: run-toy\n")
    assert run(["verify-bias", "--config", wrong, "--out", out]) == 2
    assert run(["verify-bias", "--config", tmp_path / "missing.yaml", "--out", out]) == 2


def test_verify_entropy(tmp_path):
    cfg = write_config(
        tmp_path, "ent.yaml",
        "lengths: [64, 256, 1024]\nlambdas: [0.0, 1.0]\ntrials: 100\nlognormal_trials: 200000\n",
    )
    out = tmp_path / "ent.csv"
    assert run(["verify-entropy", "--config", cfg, "--out", out]) == 0
    rows = read_csv(out)
    assert {"i", "lambda", "empirical_H", "target_H", "stderr", "pass"} <= set(rows[0])
    scaled = [r for r in rows if r["mode"] == "scaled"]
    for r in scaled:
        if float(r["lambda"]) == 0.0:
            assert float(r["empirical_H"]) == pytest.approx(math.log(int(r["i"])), abs=1e-12)
    at_one = [float(r["empirical_H"]) for r in scaled if float(r["lambda"]) == 1.0]
    assert at_one == sorted(at_one)
    lognormal = read_csv(tmp_path / "ent.lognormal.csv")
    assert len(lognormal) == 6 and all(r["pass"] == "1" for r in lognormal)


def test_run_toy_small(tmp_path):
    cfg = write_config(
        tmp_path, "toy.yaml",
        "n: 96\nsteps: 5\nvocab: 32\nheads: 2\nhead_dim: 8\nrecent_budget: 8\nbudgets: [24, 101]\n",
    )
    out = tmp_path / "toy.csv"
    status = run(["run-toy", "--config", cfg, "--out", out])
    metrics = read_csv(out)
    assert len(metrics) == 2 * 5
    assert {(r["policy"], int(r["budget"])) for r in metrics} == {
        (p, b) for p in ("full", "sink", "h2o", "recent_accum", "aha") for b in (24, 101)
    }
    assert all(r["matches_full"] == "1" for r in metrics if int(r["budget"]) == 101)
    tokens = read_csv(tmp_path / "toy.tokens.csv")
    by_policy = {}
    for r in tokens:
        if r["budget"] == "101":
            by_policy.setdefault(r["policy"], []).append(r["token"])
    assert by_policy["full"] == by_policy["aha"]
    trace = GenerationTrace.read(tmp_path / "toy.trace.aha.B24.tsv")
    assert len(trace.records) == 5
    assert all(len(k) <= 24 for rec in trace.records for k in rec.retained.values())
    assert status in (0, 1)


def test_run_toy_json_and_determinism(tmp_path):
    cfg = write_config(tmp_path, "toy.yaml", "n: 48\nsteps: 3\nvocab: 16\nrecent_budget: 4\nbudgets: [12]\n")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(["run-toy", "--config", cfg, "--format", "json", "--out", a])
    run(["run-toy", "--config", cfg, "--format", "json", "--out", b])
    assert a.read_bytes() == b.read_bytes()
    rows = json.loads(a.read_text())
    assert isinstance(rows, list) and rows[0]["policy"] == "full"
    for name in ("tokens.json", "trace.aha.B12.tsv"):
        assert (tmp_path / f"a.{name}").read_bytes() == (tmp_path / f"b.{name}").read_bytes()


def test_sweep_sparsity(tmp_path):
    cfg = write_config(tmp_path, "sp.yaml", "n: 512\nnum_thresholds: 56\ntrials: 5\n")
    out = tmp_path / "sp.csv"
    assert run(["sweep-sparsity", "--config", cfg, "--out", out]) == 0
    rows = read_csv(out)
    assert len(rows) == 56
    assert (float(rows[0]["frac_plain"]), float(rows[0]["frac_refined"])) == (1.0, 1.0)
    assert (float(rows[-1]["frac_plain"]), float(rows[-1]["frac_refined"])) == (0.0, 0.0)
    assert float(rows[-1]["threshold"]) > 1
