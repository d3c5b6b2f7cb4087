"""Progressive sparse attention (threshold-driven block attention) with a
simulated two-tier KV block store, top-k and exact baselines, and a
decode-serving simulator."""

from pathlib import Path

from .attention import (
    ScoredBlockResult,
    SoftmaxAccumulator,
    block_partial_attention,
    exact_attention,
    finalize,
    merge_partial,
)
from .engine import (
    CoverageEstimator,
    PSAConfig,
    PSAResult,
    RankingMode,
    estimate_coverage,
    psa_attention,
    psa_attention_batched,
    psa_attention_heads,
    topk_attention,
)
from .metadata import BlockMetadata, Estimator, KVBlock, build_metadata, criticality_score, rank_blocks
from .pipeline import PipelineTimings, StopSignal, run_pipelined, run_sequential
from .store import CacheStats, Eviction, Policy, TieredBlockStore

SCENARIO_DIR = Path(__file__).parent / "scenarios"

__all__ = [
    "BlockMetadata", "CacheStats", "CoverageEstimator", "Estimator", "Eviction", "KVBlock",
    "PSAConfig", "PSAResult", "PipelineTimings", "Policy", "RankingMode", "SCENARIO_DIR",
    "ScoredBlockResult", "SoftmaxAccumulator", "StopSignal", "TieredBlockStore",
    "block_partial_attention", "build_metadata", "criticality_score", "estimate_coverage",
    "exact_attention", "finalize", "merge_partial", "psa_attention", "psa_attention_batched",
    "psa_attention_heads", "rank_blocks", "run_pipelined", "run_sequential", "topk_attention",
]
