import math

import numpy as np
import pytest

from ahakv.attention import QkvSet, SynthConfig, attention_matrix, causal_logits, gaussian_qkv
from ahakv.cache import (
    GenerationTrace,
    PolicyCache,
    generation_step,
    prefill,
    run_policy_end_to_end,
)
from ahakv.numerics import LambdaSchedule
from ahakv.policies import Policy, PolicyConfig, recent_accum_scores, select_retained
from ahakv.rng import stream
from ahakv.toy_model import DenseCache, ToyModelConfig, build_toy_model, greedy_decode, reference_decode

from reference_alg1 import ref_generate, ref_prefill


def qkv_of(n, d, seed):
    return gaussian_qkv(SynthConfig(n, d, seed))


def new_tokens(count, d, seed):
    rng = stream(seed, "new-tokens")
    return [tuple(rng.standard_normal((3, d))) for _ in range(count)]


def test_prefill_under_budget_keeps_everything():
    qkv = qkv_of(5, 3, 0)
    state = prefill(qkv, PolicyConfig(8, 2, 6))
    assert state.indices.tolist() == [0, 1, 2, 3, 4]
    np.testing.assert_array_equal(state.keys, qkv.k)


def test_prefill_matches_reference_hand_sized():
    qkv = qkv_of(4, 2, 17)
    kept, F = ref_prefill(qkv.q.tolist(), qkv.k.tolist(), qkv.v.tolist(), 3, 1, 2)
    state = prefill(qkv, PolicyConfig(3, 1, 2))
    assert state.indices.tolist() == kept
    np.testing.assert_allclose(state.scores, [F[j] for j in kept], rtol=1e-12)


def test_prefill_reductions_compose():
    rng = np.random.default_rng(1)
    n, d = 30, 4
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    q, k = rng.standard_normal((2, n, d))
    cfg = PolicyConfig(10, 3, 7, lambda_schedule=LambdaSchedule(10, d, fixed=1.0), pool_kernel=1)
    state = prefill(QkvSet(q, k, v), cfg)
    attn = attention_matrix(causal_logits(q, k))
    expected = select_retained(recent_accum_scores(attn, 3), n, cfg)
    np.testing.assert_array_equal(state.indices, expected)


def test_generation_step_under_budget_and_unlimited_output():
    qkv = qkv_of(6, 3, 2)
    cfg = PolicyConfig(50, 4, 46)
    state = prefill(qkv, cfg)
    keys, values = qkv.k, qkv.v
    for q, k, v in new_tokens(5, 3, 2):
        state, out = generation_step(state, q, k, v, cfg)
        keys, values = np.vstack([keys, k]), np.vstack([values, v])
        logits = keys @ q / math.sqrt(3)
        p = np.exp(logits - logits.max())
        np.testing.assert_allclose(out, (p / p.sum()) @ values, rtol=1e-12)
    assert state.indices.tolist() == list(range(11))
    assert state.length == 11 and state.step == 5


def test_generation_step_two_steps_match_reference():
    qkv = qkv_of(3, 2, 5)
    cfg = PolicyConfig(2, 1, 1)
    toks = new_tokens(2, 2, 5)
    kept, F = ref_prefill(qkv.q.tolist(), qkv.k.tolist(), qkv.v.tolist(), 2, 1, 1)
    snaps, _ = ref_generate(kept, F, qkv.k.tolist(), qkv.v.tolist(), [tuple(map(list, t)) for t in toks], 2, 1, 1)
    state = prefill(qkv, cfg)
    assert state.indices.tolist() == kept
    for (q, k, v), snap in zip(toks, snaps):
        state, _ = generation_step(state, q, k, v, cfg)
        assert state.indices.tolist() == snap
        assert state.indices.size == 2


def test_generation_step_dimension_check():
    state = prefill(qkv_of(3, 2, 0), PolicyConfig(2, 1, 1))
    with pytest.raises(ValueError):
        generation_step(state, np.zeros(3), np.zeros(2), np.zeros(2), PolicyConfig(2, 1, 1))


@pytest.mark.parametrize("policy", list(Policy))
def test_budget_recency_and_monotone_scores(policy):
    cfg = PolicyConfig(6, 2, 4, policy=policy)
    state = prefill(qkv_of(15, 4, 8), cfg)
    for q, k, v in new_tokens(12, 4, 8):
        before = dict(zip(state.indices.tolist(), state.scores.tolist()))
        state, _ = generation_step(state, q, k, v, cfg)
        live = state.length
        if policy is Policy.FULL:
            assert state.indices.size == live
            continue
        assert state.indices.size == 6
        assert set(range(live - 2, live)) <= set(state.indices.tolist())
        for j, f in zip(state.indices.tolist(), state.scores.tolist()):
            assert f >= 0
            if j in before:
                assert f >= before[j]


def test_sink_policy_keeps_prefix_and_tail():
    cfg = PolicyConfig(8, 2, 6, policy="sink")
    state = prefill(qkv_of(20, 3, 1), cfg)
    assert state.indices.tolist() == [0, 1, 2, 3, 16, 17, 18, 19]
    for q, k, v in new_tokens(3, 3, 1):
        state, _ = generation_step(state, q, k, v, cfg)
    assert state.indices.tolist() == [0, 1, 2, 3, 19, 20, 21, 22]


@pytest.fixture(scope="module")
def model():
    return build_toy_model(ToyModelConfig(vocab=40, layers=2, heads=2, head_dim=8, seed=21))


def test_full_budget_decode_logits_match_dense(model):
    prompt = stream(1, "prompt").integers(0, 40, 24)
    dense, managed = DenseCache(), PolicyCache(PolicyConfig(64, 4, 60))
    a = model.prefill(prompt, dense)[-1]
    b = model.prefill(prompt, managed)[-1]
    np.testing.assert_array_equal(a, b)
    for pos, tok in enumerate([3, 17, 8, 8, 30], start=24):
        np.testing.assert_allclose(model.decode_step(tok, pos, dense), model.decode_step(tok, pos, managed), rtol=1e-12)


def test_small_budget_changes_logits(model):
    prompt = stream(2, "prompt").integers(0, 40, 60)
    dense, managed = DenseCache(), PolicyCache(PolicyConfig(8, 2, 6))
    model.prefill(prompt, dense)
    model.prefill(prompt, managed)
    assert not np.allclose(model.decode_step(5, 60, dense), model.decode_step(5, 60, managed))


@pytest.mark.parametrize("policy", list(Policy))
def test_end_to_end_full_budget_equals_reference(model, policy):
    prompt = stream(4, "prompt").integers(0, 40, 30)
    tokens, trace = run_policy_end_to_end(model, prompt, 6, PolicyConfig(40, 4, 36, policy=policy))
    assert tokens == reference_decode(model, prompt, 6)
    assert [r.step for r in trace.records] == list(range(6))


def test_end_to_end_trace_budget_and_determinism(model):
    prompt = stream(5, "prompt").integers(0, 40, 2048)
    cfg = PolicyConfig.split(256, 32)
    tokens, trace = run_policy_end_to_end(model, prompt, 4, cfg)
    again_tokens, again = run_policy_end_to_end(model, prompt, 4, cfg)
    assert tokens == again_tokens
    assert trace.dumps() == again.dumps()
    for rec in trace.records:
        assert len(rec.retained) == 4
        assert all(len(kept) <= 256 for kept in rec.retained.values())


def test_trace_round_trip(model, tmp_path):
    prompt = stream(6, "prompt").integers(0, 40, 40)
    _, trace = run_policy_end_to_end(model, prompt, 5, PolicyConfig(10, 2, 8, policy="h2o"))
    path = tmp_path / "trace.tsv"
    trace.write(path)
    text = path.read_text()
    assert text.endswith("\n") and "\r" not in text
    first = text.splitlines()[0].split("\t")
    assert len(first) == 4 and first[0] == "0" and first[2] == "0.0"
    loaded = GenerationTrace.read(path)
    assert loaded.dumps() == text
    for orig, back in zip(trace.records[1:], loaded.records[1:]):
        assert orig.evicted == back.evicted
    assert any(v is not None for rec in trace.records[1:] for v in rec.evicted.values())


def test_greedy_decode_with_policy_cache_is_deterministic(model):
    prompt = stream(7, "prompt").integers(0, 40, 50)
    cfg = PolicyConfig(12, 3, 9)
    assert greedy_decode(model, prompt, 5, PolicyCache(cfg)) == greedy_decode(model, prompt, 5, PolicyCache(cfg))
