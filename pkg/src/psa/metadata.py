"""KV blocks, their compact key summaries, and block criticality scoring."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Estimator(str, enum.Enum):
    MEAN = "mean"
    CUBOID_UPPER_BOUND = "cuboid_upper_bound"
    CUBOID_MEAN = "cuboid_mean"


@dataclass(frozen=True, eq=False)
class KVBlock:
    """Keys and values of up to ``block_size`` consecutive tokens of one layer.

    ``keys``/``values`` are ``(n_tokens, d)``, or ``(n_kv_heads, n_tokens, d)``
    for multi-head storage. Arrays are frozen on construction so that a block
    handed out by the store can never be mutated behind its back.
    """

    block_id: int
    layer_id: int
    keys: np.ndarray
    values: np.ndarray
    request_id: int | None = None

    def __post_init__(self):
        keys = np.array(self.keys, copy=True)
        values = np.array(self.values, copy=True)
        if keys.ndim not in (2, 3) or keys.shape[-2] == 0:
            raise ValueError("empty block")
        if keys.shape[:-1] != values.shape[:-1]:
            raise ValueError(f"keys {keys.shape} and values {values.shape} disagree on rows")
        if self.layer_id < 0:
            raise ValueError("layer_id must be >= 0")
        keys.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[-2]

    @property
    def d(self) -> int:
        return self.keys.shape[-1]

    @property
    def n_heads(self) -> int:
        return 1 if self.keys.ndim == 2 else self.keys.shape[0]

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes

    def head(self, h: int) -> "KVBlock":
        if self.keys.ndim == 2:
            if h != 0:
                raise IndexError(f"single-head block has no head {h}")
            return self
        return KVBlock(self.block_id, self.layer_id, self.keys[h], self.values[h], self.request_id)


@dataclass(frozen=True)
class BlockMetadata:
    """O(d) summary of a block's keys: mean and bounding cuboid [lo, hi]."""

    block_id: int
    layer_id: int
    mean_key: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_tokens: int

    @property
    def nbytes(self) -> int:
        return self.mean_key.nbytes + self.lo.nbytes + self.hi.nbytes

    def head(self, h: int) -> "BlockMetadata":
        if self.mean_key.ndim == 1:
            if h != 0:
                raise IndexError(f"single-head metadata has no head {h}")
            return self
        return BlockMetadata(
            self.block_id, self.layer_id, self.mean_key[h], self.lo[h], self.hi[h], self.n_tokens
        )


def build_metadata(block: KVBlock) -> BlockMetadata:
    keys = np.asarray(block.keys, dtype=np.float64)
    if keys.shape[-2] == 0:
        raise ValueError("empty block")
    return BlockMetadata(
        block_id=block.block_id,
        layer_id=block.layer_id,
        mean_key=keys.mean(axis=-2),
        lo=keys.min(axis=-2),
        hi=keys.max(axis=-2),
        n_tokens=block.n_tokens,
    )


def _scores(q: np.ndarray, mean: np.ndarray, lo: np.ndarray, hi: np.ndarray,
            estimator: Estimator, scale: float) -> np.ndarray:
    # Works on a single summary (d,) or a stack (n_blocks, d).
    if estimator is Estimator.MEAN:
        return np.sum(mean * q, axis=-1) * scale
    upper = np.sum(np.maximum(lo * q, hi * q), axis=-1) * scale
    if estimator is Estimator.CUBOID_UPPER_BOUND:
        return upper
    return 0.5 * (np.sum(mean * q, axis=-1) * scale + upper)


def criticality_score(q, meta: BlockMetadata, estimator: Estimator = Estimator.CUBOID_MEAN,
                      scale: float = 1.0) -> float:
    """Estimated importance of the block summarized by ``meta`` to ``q``.

    The cuboid upper bound takes, per dimension, whichever cuboid face gives
    the larger product with q, so it dominates every token score in the block.
    CUBOID_MEAN averages that bound with the mean-key score.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != meta.mean_key.shape:
        raise ValueError(f"query shape {q.shape} != metadata shape {meta.mean_key.shape}")
    return float(_scores(q, meta.mean_key, meta.lo, meta.hi, Estimator(estimator), scale))


def criticality_scores(q, metas, estimator: Estimator = Estimator.CUBOID_MEAN,
                       scale: float = 1.0) -> np.ndarray:
    """Vectorized :func:`criticality_score` over a list of metadata."""
    q = np.asarray(q, dtype=np.float64)
    mean = np.stack([m.mean_key for m in metas])
    if mean.shape[1:] != q.shape:
        raise ValueError(f"query shape {q.shape} != metadata shape {mean.shape[1:]}")
    lo = np.stack([m.lo for m in metas])
    hi = np.stack([m.hi for m in metas])
    return _scores(q, mean, lo, hi, Estimator(estimator), scale)


def order_by_score(scores, block_ids) -> list[int]:
    """Indices sorted by descending score, ties by ascending block id."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.asarray(block_ids), -scores)).tolist()


def rank_blocks(q, metas, estimator: Estimator = Estimator.CUBOID_MEAN,
                scale: float = 1.0) -> list[int]:
    if len(metas) == 0:
        raise ValueError("no blocks to rank")
    scores = criticality_scores(q, metas, estimator, scale)
    return order_by_score(scores, [m.block_id for m in metas])
