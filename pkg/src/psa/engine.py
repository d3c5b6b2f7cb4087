"""Progressive sparse attention over a tiered block store.

Blocks are ranked by criticality and consumed in microbatches of ``m``
blocks. After each microbatch the engine estimates which fraction of the
total softmax mass it has already seen, treating every unprocessed block as
if it were as heavy as the lightest processed one, and stops once that
estimate exceeds ``epsilon``.

The same loop, with a block limit instead of a coverage threshold, gives the
fixed-budget top-k baseline.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    SoftmaxAccumulator,
    block_partial_attention,
    block_scores,
    default_scale,
    finalize,
    merge_partial,
)
from .metadata import Estimator, order_by_score, rank_blocks


class RankingMode(str, enum.Enum):
    ESTIMATED = "estimated"
    # Rank by each block's true attention mass; needs the block contents and
    # exists only to separate estimator error from the stopping rule.
    ORACLE = "oracle"


@dataclass
class PSAConfig:
    epsilon: float = 0.95
    microbatch_size: int = 4
    block_size: int = 32
    estimator: Estimator = Estimator.CUBOID_MEAN
    ranking_mode: RankingMode = RankingMode.ESTIMATED
    scale: float | None = None

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.microbatch_size < 1:
            raise ValueError("microbatch_size must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.estimator = Estimator(self.estimator)
        self.ranking_mode = RankingMode(self.ranking_mode)


@dataclass
class CoverageEstimator:
    """Log-domain running totals: accumulated mass, lightest block, blocks left."""

    n_left: int
    log_as_acc: float = -math.inf
    log_as_min: float = math.inf

    def observe(self, log_as: float) -> None:
        if self.n_left <= 0:
            raise ValueError("more blocks observed than were ranked")
        self.log_as_acc = float(np.logaddexp(self.log_as_acc, log_as))
        self.log_as_min = min(self.log_as_min, log_as)
        self.n_left -= 1


def estimate_coverage(ce: CoverageEstimator) -> float:
    """AS_acc / (AS_acc + AS_min * n_left), evaluated without leaving log space."""
    if ce.log_as_acc == -math.inf:
        raise ValueError("no blocks processed")
    if ce.n_left == 0:
        return 1.0
    return 1.0 / (1.0 + ce.n_left * math.exp(ce.log_as_min - ce.log_as_acc))


@dataclass
class PSAResult:
    output: np.ndarray
    blocks_processed: int
    estimated_coverage: float
    true_coverage: float | None = None
    terminated_early: bool = False
    iterations: int = 0
    total_blocks: int = 0
    processed_ids: list[int] = field(default_factory=list)
    coverage_trace: list[float] = field(default_factory=list)


def block_log_mass(q, block, scale: float) -> float:
    """ln sum_i exp(q.k_i * scale) over the block, in float64."""
    s = block_scores(q, block.keys, scale)
    m = s.max()
    return float(m + np.log(np.exp(s - m).sum()))


def _logsumexp(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def coverage_of(q, selected_ids, all_ids, store, scale: float, kv_head: int = 0) -> float:
    """True fraction of softmax mass held by ``selected_ids`` (oracle, float64)."""
    selected = set(selected_ids)
    if not selected:
        return 0.0
    if selected >= set(all_ids):
        return 1.0
    masses = {b: block_log_mass(q, store.peek(b).head(kv_head), scale) for b in all_ids}
    rest = [masses[b] for b in all_ids if b not in selected]
    # 1 - rest/total keeps the result < 1 whenever any mass is left out.
    return 1.0 - math.exp(_logsumexp(rest) - _logsumexp(list(masses.values())))


def rank_for_query(q, block_ids, store, cfg: PSAConfig, kv_head: int = 0) -> list[int]:
    """Block ids in the order the engine will visit them."""
    scale = _scale(q, cfg)
    if cfg.ranking_mode is RankingMode.ORACLE:
        scores = [block_log_mass(q, store.peek(b).head(kv_head), scale) for b in block_ids]
        order = order_by_score(scores, block_ids)
    else:
        metas = [store.metadata(b).head(kv_head) for b in block_ids]
        order = rank_blocks(q, metas, cfg.estimator, scale)
    return [block_ids[i] for i in order]


def coverage_curve(q, block_ids, store, cfg: PSAConfig, kv_head: int = 0) -> np.ndarray:
    """True coverage after the first k ranked blocks, for k = 1..len(block_ids)."""
    scale = _scale(q, cfg)
    ranked = rank_for_query(q, block_ids, store, cfg, kv_head)
    masses = np.array([block_log_mass(q, store.peek(b).head(kv_head), scale) for b in ranked])
    total = _logsumexp(masses)
    # Suffix sums of the tail give 1 - tail/total, exact 1.0 only at k = n.
    tail = np.logaddexp.accumulate(masses[::-1])[::-1]
    curve = np.ones(len(ranked))
    curve[:-1] = 1.0 - np.exp(tail[1:] - total)
    return curve


def _scale(q, cfg: PSAConfig) -> float:
    return cfg.scale if cfg.scale is not None else default_scale(np.shape(q)[-1])


class ProgressiveRun:
    """Per-query state of one progressive attention call.

    Loading is left to the caller so the same state machine can be driven by
    the simple loop, the lockstep batched loop, or the two-thread pipeline.
    ``stop_on_coverage=False`` disables the threshold test; ``limit`` caps the
    number of blocks (the top-k baseline).
    """

    def __init__(self, q, block_ids, store, cfg: PSAConfig, *, limit: int | None = None,
                 stop_on_coverage: bool = True, kv_head: int = 0):
        block_ids = list(block_ids)
        if not block_ids:
            raise ValueError("empty block list")
        self.q = np.asarray(q)
        self.cfg = cfg
        self.store = store
        self.kv_head = kv_head
        self.scale = _scale(q, cfg)
        self.epsilon = cfg.epsilon if stop_on_coverage else None
        self.all_ids = block_ids
        self.ranked = rank_for_query(self.q, block_ids, store, cfg, kv_head)
        self.limit = len(block_ids) if limit is None else max(1, min(limit, len(block_ids)))
        self.ce = CoverageEstimator(n_left=len(block_ids))
        self.acc: SoftmaxAccumulator | None = None
        self.processed: list[int] = []
        self.trace: list[float] = []
        self.iterations = 0
        self.done = False
        self._cursor = 0

    def next_microbatch(self) -> list[int]:
        if self.done:
            return []
        end = min(self._cursor + self.cfg.microbatch_size, self.limit)
        ids = self.ranked[self._cursor:end]
        self._cursor = end
        return ids

    def consume(self, blocks) -> bool:
        """Merge one loaded microbatch; returns True once the query is finished."""
        acc = self.acc
        for block in blocks:
            part = block_partial_attention(self.q, block.head(self.kv_head), self.scale)
            if acc is None:
                acc = SoftmaxAccumulator.empty(len(part.out_unnorm), part.out_unnorm.dtype)
            acc = merge_partial(acc, part)
            self.ce.observe(part.log_as)
            self.processed.append(block.block_id)
        self.acc = acc
        self.iterations += 1
        coverage = estimate_coverage(self.ce)
        self.trace.append(coverage)
        if (self.epsilon is not None and coverage > self.epsilon) or len(self.processed) >= self.limit:
            self.done = True
        return self.done

    def result(self, true_coverage: bool = False) -> PSAResult:
        if self.acc is None:
            raise ValueError("no blocks processed")
        return PSAResult(
            output=finalize(self.acc),
            blocks_processed=len(self.processed),
            estimated_coverage=self.trace[-1],
            true_coverage=(
                coverage_of(self.q, self.processed, self.all_ids, self.store, self.scale, self.kv_head)
                if true_coverage else None
            ),
            terminated_early=len(self.processed) < len(self.all_ids),
            iterations=self.iterations,
            total_blocks=len(self.all_ids),
            processed_ids=list(self.processed),
            coverage_trace=list(self.trace),
        )


def _load(store, ids, pin: bool):
    return [store.load_block(b, pin=pin) for b in ids]


def _drive(run: ProgressiveRun, store, pin: bool) -> None:
    while not run.done:
        ids = run.next_microbatch()
        blocks = _load(store, ids, pin)
        try:
            run.consume(blocks)
        finally:
            if pin:
                store.unpin(ids)


def psa_attention(q, block_ids, cfg: PSAConfig, store, *, true_coverage: bool = False,
                  pin: bool = False, kv_head: int = 0) -> PSAResult:
    """Progressive sparse attention of one query over ``block_ids``."""
    run = ProgressiveRun(q, block_ids, store, cfg, kv_head=kv_head)
    _drive(run, store, pin)
    return run.result(true_coverage)


def topk_attention(q, block_ids, k: int, estimator: Estimator, store, *, scale: float | None = None,
                   microbatch_size: int | None = None, ranking_mode=RankingMode.ESTIMATED,
                   true_coverage: bool = False, pin: bool = False, kv_head: int = 0) -> PSAResult:
    """Attention over exactly the ``k`` top-ranked blocks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(block_ids)) if block_ids else k
    cfg = PSAConfig(epsilon=1.0, microbatch_size=microbatch_size or k, estimator=estimator,
                    ranking_mode=ranking_mode, scale=scale)
    run = ProgressiveRun(q, block_ids, store, cfg, limit=k, stop_on_coverage=False, kv_head=kv_head)
    _drive(run, store, pin)
    return run.result(true_coverage)


def psa_attention_batched(qs, block_lists, cfg: PSAConfig, store, *, topk: int | None = None,
                          true_coverage: bool = False, pin: bool = False,
                          iteration_log: list | None = None) -> list[PSAResult]:
    """Lockstep progressive attention for a batch of queries.

    Every iteration loads and merges one microbatch for each live query, then
    retires the queries whose coverage estimate passed ``epsilon``. With
    ``topk`` set, each query instead stops after ``topk`` blocks.
    ``iteration_log`` receives one dict per iteration with the number of
    live queries, blocks loaded and fast-pool misses.
    """
    if len(qs) != len(block_lists):
        raise ValueError("one block list per query required")
    runs = [
        ProgressiveRun(q, ids, store, cfg, limit=topk, stop_on_coverage=topk is None)
        for q, ids in zip(qs, block_lists)
    ]
    live = list(range(len(runs)))
    iteration = 0
    while live:
        misses_before = store.stats.misses
        batch = [(i, runs[i].next_microbatch()) for i in live]
        loaded = []
        try:
            for i, ids in batch:
                loaded.append(_load(store, ids, pin))
            for (i, _), blocks in zip(batch, loaded):
                runs[i].consume(blocks)
        finally:
            if pin:
                for (_, ids), _blocks in zip(batch, loaded):
                    store.unpin(ids)
        if iteration_log is not None:
            iteration_log.append({
                "iteration": iteration,
                "live": len(live),
                "blocks": sum(len(ids) for _, ids in batch),
                "misses": store.stats.misses - misses_before,
            })
        live = [i for i in live if not runs[i].done]
        iteration += 1
    return [r.result(true_coverage) for r in runs]


def psa_attention_heads(q_heads, block_ids, cfg: PSAConfig, store, n_kv_heads: int | None = None,
                        *, true_coverage: bool = False) -> tuple[list[PSAResult], set[int]]:
    """Independent progressive attention per query head over multi-head blocks.

    Query head ``h`` reads KV head ``h // (n_heads // n_kv_heads)``, so GQA
    groups share KV heads. Returns per-head results and the union of block ids
    any head had to fetch.
    """
    q_heads = np.asarray(q_heads)
    n_heads = q_heads.shape[0]
    n_kv_heads = n_kv_heads or n_heads
    if n_heads % n_kv_heads:
        raise ValueError(f"{n_heads} query heads cannot be grouped over {n_kv_heads} KV heads")
    group = n_heads // n_kv_heads
    results = [
        psa_attention(q_heads[h], block_ids, cfg, store, true_coverage=true_coverage, kv_head=h // group)
        for h in range(n_heads)
    ]
    fetched = set()
    for r in results:
        fetched.update(r.processed_ids)
    return results, fetched
