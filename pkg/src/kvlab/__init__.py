"""Voted-attention KV cache compression: eviction, convex and ZIP merging, audits."""

from kvlab.analysis import (
    AuditRecord,
    MergeAudit,
    StepOutcome,
    attention_sag_audit,
    bound_value,
    eviction_perturbation_closed_form,
    oracle_step,
    theorem3_audit,
)
from kvlab.attention import CacheEntry, KvCache, append, attend, attend_arrays, raw_score, raw_scores
from kvlab.harness import ExperimentConfig, run_experiment
from kvlab.merging import (
    MergeInputs,
    cam_merge,
    convex_merge,
    convex_weights_cosine,
    convex_weights_gaussian,
    zip_merge,
)
from kvlab.policy import PolicyConfig, compress, compress_prefill, importance_scores, select_eviction, select_merge_targets
from kvlab.predictor import EmaState, ema_estimate, ema_init_prefill, ema_update, merged_ema
from kvlab.simulate import Simulation, oracle_outputs, run_comparison
from kvlab.stream import Stream, generate_stream, load_trace, save_trace

__all__ = [
    "AuditRecord",
    "CacheEntry",
    "EmaState",
    "ExperimentConfig",
    "KvCache",
    "MergeAudit",
    "MergeInputs",
    "PolicyConfig",
    "Simulation",
    "StepOutcome",
    "Stream",
    "append",
    "attend",
    "attend_arrays",
    "attention_sag_audit",
    "bound_value",
    "cam_merge",
    "compress",
    "compress_prefill",
    "convex_merge",
    "convex_weights_cosine",
    "convex_weights_gaussian",
    "ema_estimate",
    "ema_init_prefill",
    "ema_update",
    "eviction_perturbation_closed_form",
    "generate_stream",
    "importance_scores",
    "load_trace",
    "merged_ema",
    "oracle_outputs",
    "oracle_step",
    "raw_score",
    "raw_scores",
    "run_comparison",
    "run_experiment",
    "save_trace",
    "select_eviction",
    "select_merge_targets",
    "theorem3_audit",
    "zip_merge",
]
