"""KV-cache eviction with recent accumulation, step-gain softmax and value priors."""

from .attention import CausalLogits, QkvSet, ScaleMode, SynthConfig, attention_matrix, causal_logits, gaussian_qkv
from .cache import GenerationTrace, HeadCacheState, PolicyCache, generation_step, prefill, run_policy_end_to_end
from .numerics import (
    GaussianParams,
    LambdaSchedule,
    avgpool_1d,
    expected_entropy,
    lambda_for,
    lognormal_mean,
    lognormal_xexp_mean,
    row_entropy,
    sg_softmax,
    softmax,
)
from .policies import (
    Policy,
    PolicyConfig,
    ValuePrior,
    h2o_scores,
    last_query_retained,
    recent_accum_scores,
    refine_scores,
    select_retained,
    sg_recent_scores,
    sink_retained,
    value_prior,
)
from .toy_model import ToyModel, ToyModelConfig, build_toy_model, greedy_decode, reference_decode

__version__ = "0.1.0"
