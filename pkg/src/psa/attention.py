"""Exact attention and mergeable partial-attention accumulators.

The engine never materializes a full softmax. Each block yields a partial
result anchored at its own max score, and partials are combined with the
usual rescale-and-add rule so that the merged state finalizes to the exact
softmax-weighted sum over every token seen.

Score bookkeeping (max, exp-sum, log mass) is always carried in float64;
the weighted value sum keeps the dtype of the block's values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def default_scale(d: int) -> float:
    return 1.0 / math.sqrt(d)


def exact_attention(q, keys, values, scale: float | None = None) -> np.ndarray:
    """Dense softmax attention of one query over all keys, in float64.

    This is the reference path: two passes (max, then normalized weights),
    no blocking, no accumulation tricks.
    """
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("empty context")
    if values.ndim != 2 or values.shape[0] != keys.shape[0]:
        raise ValueError(
            f"keys/values length mismatch: {keys.shape[0]} vs {values.shape[:1]}"
        )
    if keys.shape[1] != q.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {keys.shape[1]}")
    if scale is None:
        scale = default_scale(q.shape[-1])
    scores = (keys @ q) * scale
    weights = np.exp(scores - scores.max())
    weights /= weights.sum()
    return weights @ values


@dataclass(frozen=True)
class ScoredBlockResult:
    """Partial attention over one block.

    ``out_unnorm`` is sum_i exp(s_i - max_score) * v_i, ``exp_sum`` is
    sum_i exp(s_i - max_score) and ``log_as`` = max_score + ln(exp_sum) is the
    log of the block's raw attention mass.
    """

    out_unnorm: np.ndarray
    max_score: float
    exp_sum: float
    log_as: float


def block_scores(q, keys, scale: float) -> np.ndarray:
    """Scaled dot-product scores of ``q`` against each key row, in float64."""
    keys = np.asarray(keys)
    return (keys.astype(np.float64, copy=False) @ np.asarray(q, dtype=np.float64)) * scale


def block_partial_attention(q, block, scale: float | None = None) -> ScoredBlockResult:
    """Attention of ``q`` restricted to ``block`` (anything with keys/values)."""
    keys = np.asarray(block.keys)
    values = np.asarray(block.values)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("empty block")
    if values.shape[0] != keys.shape[0]:
        raise ValueError("block keys/values row count mismatch")
    if scale is None:
        scale = default_scale(keys.shape[1])
    scores = block_scores(q, keys, scale)
    max_score = float(scores.max())
    weights = np.exp(scores - max_score)
    exp_sum = float(weights.sum())
    out = weights.astype(values.dtype, copy=False) @ values
    return ScoredBlockResult(
        out_unnorm=out,
        max_score=max_score,
        exp_sum=exp_sum,
        log_as=max_score + math.log(exp_sum),
    )


@dataclass(frozen=True)
class SoftmaxAccumulator:
    """Running softmax state; empty when ``exp_sum == 0``."""

    out_unnorm: np.ndarray
    max_score: float
    exp_sum: float
    log_as_acc: float

    @classmethod
    def empty(cls, d: int, dtype=np.float32) -> "SoftmaxAccumulator":
        return cls(np.zeros(d, dtype=dtype), -math.inf, 0.0, -math.inf)

    @property
    def is_empty(self) -> bool:
        return self.exp_sum == 0.0


def merge_partial(acc: SoftmaxAccumulator, part: ScoredBlockResult) -> SoftmaxAccumulator:
    """Fold one block's partial into the accumulator, rescaling to a shared max."""
    if acc.is_empty:
        return SoftmaxAccumulator(part.out_unnorm, part.max_score, part.exp_sum, part.log_as)
    new_max = max(acc.max_score, part.max_score)
    a = math.exp(acc.max_score - new_max)
    b = math.exp(part.max_score - new_max)
    exp_sum = acc.exp_sum * a + part.exp_sum * b
    dtype = acc.out_unnorm.dtype
    out = acc.out_unnorm * dtype.type(a) + part.out_unnorm.astype(dtype, copy=False) * dtype.type(b)
    return SoftmaxAccumulator(out, new_max, exp_sum, new_max + math.log(exp_sum))


def merge_accumulators(x: SoftmaxAccumulator, y: SoftmaxAccumulator) -> SoftmaxAccumulator:
    """Combine two accumulators (for tree-shaped reductions)."""
    if y.is_empty:
        return x
    return merge_partial(x, ScoredBlockResult(y.out_unnorm, y.max_score, y.exp_sum, y.log_as_acc))


def finalize(acc: SoftmaxAccumulator) -> np.ndarray:
    if acc.is_empty:
        raise ValueError("no blocks processed")
    return acc.out_unnorm / acc.out_unnorm.dtype.type(acc.exp_sum)
