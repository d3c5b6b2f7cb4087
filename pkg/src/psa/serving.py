"""Decode-serving simulation: synthetic workloads, FCFS batching, TBT accounting.

Time is simulated: each lockstep iteration costs its fast-pool misses times
the per-block load cost plus its computed blocks times the per-block compute
cost. Nothing in a report depends on wall-clock time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import PSAConfig, psa_attention_batched
from .metadata import KVBlock
from .store import CacheStats, Eviction, Policy, TieredBlockStore


class UnschedulableRequest(ValueError):
    pass


@dataclass
class WorkloadSpec:
    """Shape of a synthetic decode workload.

    ``skew`` and ``planted_fraction`` are lists assigned cyclically over
    (request, layer) pairs, which is how layers and requests get different
    attention concentration. A planted block's keys are shifted by
    ``skew * sqrt(d)`` along a direction near the request's initial query, so
    its tokens score about ``skew`` higher than isotropic ones.
    """

    n_requests: int = 4
    n_layers: int = 2
    head_dim: int = 64
    block_size: int = 32
    context_tokens: tuple[int, int] = (2048, 2048)
    decode_steps: int = 8
    skew: list[float] = field(default_factory=lambda: [6.0])
    planted_fraction: list[float] = field(default_factory=lambda: [0.1])
    planted_spread: float = 0.5
    rho: float = 0.9
    arrival_rate: float = math.inf
    seed: int = 0

    def validate(self) -> None:
        if self.n_requests < 1 or self.n_layers < 1 or self.decode_steps < 1:
            raise ValueError("n_requests, n_layers and decode_steps must be >= 1")
        if self.head_dim < 1 or self.block_size < 1:
            raise ValueError("head_dim and block_size must be >= 1")
        lo, hi = self.context_tokens
        if not 1 <= lo <= hi:
            raise ValueError(f"bad context_tokens range {self.context_tokens}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must be in [0, 1), got {self.rho}")
        if not self.skew or any(s < 0 for s in self.skew):
            raise ValueError("skew values must be >= 0")
        if not self.planted_fraction or any(not 0.0 <= f <= 1.0 for f in self.planted_fraction):
            raise ValueError("planted_fraction values must be in [0, 1]")
        if self.planted_spread < 0:
            raise ValueError("planted_spread must be >= 0")
        if not self.arrival_rate > 0:
            raise ValueError("arrival_rate must be > 0 (inf for a single burst)")


@dataclass(eq=False)
class Request:
    request_id: int
    arrival_time: float
    context_len: int
    decode_steps: int
    blocks: list[list[KVBlock]]
    queries: np.ndarray  # (n_layers, decode_steps, d)
    skew: list[float]
    planted: list[list[int]]
    tbt_ms: list[float] = field(default_factory=list)
    steps_done: int = 0
    admitted_at: float | None = None
    finished_at: float | None = None

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def block_ids(self, layer: int) -> list[int]:
        return [b.block_id for b in self.blocks[layer]]

    @property
    def finished(self) -> bool:
        return self.steps_done >= self.decode_steps


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_workload(spec: WorkloadSpec) -> list[Request]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d, bs = spec.head_dim, spec.block_size
    requests = []
    arrival = 0.0
    next_block = 0
    for r in range(spec.n_requests):
        if math.isfinite(spec.arrival_rate) and r > 0:
            arrival += rng.exponential(1.0 / spec.arrival_rate)
        n_tokens = int(rng.integers(spec.context_tokens[0], spec.context_tokens[1] + 1))
        n_blocks = -(-n_tokens // bs)
        layers, queries, skews, planted_all = [], [], [], []
        for layer in range(spec.n_layers):
            slot = r * spec.n_layers + layer
            skew = spec.skew[slot % len(spec.skew)]
            frac = spec.planted_fraction[slot % len(spec.planted_fraction)]
            q = _unit(rng.standard_normal(d))
            qs = [q]
            for _ in range(spec.decode_steps - 1):
                noise = _unit(rng.standard_normal(d))
                q = _unit(spec.rho * q + math.sqrt(1.0 - spec.rho ** 2) * noise)
                qs.append(q)
            keys = rng.standard_normal((n_tokens, d)).astype(np.float32)
            values = rng.standard_normal((n_tokens, d)).astype(np.float32)
            n_planted = 0 if frac == 0 else max(1, round(frac * n_blocks))
            planted = sorted(rng.choice(n_blocks, size=n_planted, replace=False).tolist())
            for j in planted:
                u = _unit(qs[0] + spec.planted_spread * _unit(rng.standard_normal(d)))
                keys[j * bs:(j + 1) * bs] += np.float32(skew * math.sqrt(d)) * u.astype(np.float32)
            blocks = []
            for j in range(n_blocks):
                sl = slice(j * bs, min((j + 1) * bs, n_tokens))
                blocks.append(KVBlock(next_block, layer, keys[sl], values[sl], request_id=r))
                next_block += 1
            layers.append(blocks)
            queries.append(np.stack(qs))
            skews.append(skew)
            planted_all.append(planted)
        requests.append(Request(
            request_id=r, arrival_time=arrival, context_len=n_tokens,
            decode_steps=spec.decode_steps, blocks=layers, queries=np.stack(queries),
            skew=skews, planted=planted_all,
        ))
    return requests


@dataclass
class StoreConfig:
    capacity_slots: int = 256
    policy: Policy = Policy.UNIFIED
    eviction: Eviction = Eviction.LRU
    write_allocate: bool = True

    def __post_init__(self):
        self.policy = Policy(self.policy)
        self.eviction = Eviction(self.eviction)


@dataclass
class BatchingConfig:
    load_ms_per_block: float = 0.05
    compute_ms_per_block: float = 0.01
    iteration_overhead_ms: float = 0.02
    pipelined: bool = True
    max_batch: int | None = None
    audit_coverage: bool = True


@dataclass
class ServingReport:
    method: str
    param: float | None
    n_requests: int
    decode_iterations: int
    tbt_ms: list[float]
    blocks_per_query: list[int]
    total_blocks_per_query: list[int]
    coverage: list[float]
    stats: CacheStats
    sequential_ms: float
    pipelined_ms: float
    admissions: list[tuple[float, int]]
    max_requirement: int
    capacity: int
    makespan_s: float

    @property
    def kv_fraction(self) -> float:
        return sum(self.blocks_per_query) / sum(self.total_blocks_per_query)

    @property
    def overlap_efficiency(self) -> float:
        return self.sequential_ms / self.pipelined_ms if self.pipelined_ms > 0 else 1.0

    def tbt_percentile(self, p: float) -> float:
        return float(np.percentile(self.tbt_ms, p)) if self.tbt_ms else 0.0

    def to_dict(self) -> dict:
        cov = self.coverage
        return {
            "method": self.method,
            "param": self.param,
            "n_requests": self.n_requests,
            "decode_iterations": self.decode_iterations,
            "tbt_ms": {
                "mean": float(np.mean(self.tbt_ms)) if self.tbt_ms else 0.0,
                "p50": self.tbt_percentile(50),
                "p99": self.tbt_percentile(99),
            },
            "blocks_per_query": {
                "mean": float(np.mean(self.blocks_per_query)),
                "p99": float(np.percentile(self.blocks_per_query, 99)),
            },
            "kv_fraction": self.kv_fraction,
            "coverage": {
                "mean": float(np.mean(cov)) if cov else None,
                "min": float(np.min(cov)) if cov else None,
            },
            "cache": self.stats.to_dict(),
            "overlap_efficiency": self.overlap_efficiency,
            "admissions": [[t, rid] for t, rid in self.admissions],
            "max_requirement": self.max_requirement,
            "capacity": self.capacity,
            "makespan_s": self.makespan_s,
        }


def _iteration_times(log, batching: BatchingConfig) -> tuple[list[float], list[float]]:
    loads = [it["misses"] * batching.load_ms_per_block for it in log]
    computes = [it["blocks"] * batching.compute_ms_per_block + batching.iteration_overhead_ms
                for it in log]
    return loads, computes


def pipelined_time(loads, computes) -> float:
    """Two-stage pipeline makespan where load i+1 overlaps compute i."""
    if not loads:
        return 0.0
    total = loads[0]
    for i in range(len(loads) - 1):
        total += max(computes[i], loads[i + 1])
    return total + computes[-1]


class _Admission:
    """Fast-pool slot demand of one lockstep iteration, per eviction domain."""

    def __init__(self, store: TieredBlockStore, microbatch: int):
        self.store = store
        self.m = microbatch

    def demand(self, requests) -> dict:
        need: dict = {}
        for req in requests:
            for layer, blocks in enumerate(req.blocks):
                dom = None if self.store.policy is Policy.UNIFIED else layer
                need[dom] = need.get(dom, 0) + min(self.m, len(blocks))
        return need

    def fits(self, requests) -> bool:
        for dom, n in self.demand(requests).items():
            cap = self.store.capacity() if dom is None else self.store.capacity(dom)
            if n > cap:
                return False
        return True

    def total(self, requests) -> int:
        return sum(self.demand(requests).values())


def run_serving(requests: list[Request], engine: PSAConfig, store_cfg: StoreConfig,
                batching: BatchingConfig | None = None, *, topk: int | None = None,
                method: str | None = None, store: TieredBlockStore | None = None) -> ServingReport:
    """Serve ``requests`` to completion and aggregate per-step statistics.

    Requests are admitted first-come-first-serve whenever one iteration's
    microbatches for every running request and layer still fit in the fast
    pool at once. ``topk`` switches the engine to the fixed-budget baseline.
    """
    if not requests:
        raise ValueError("no requests")
    batching = batching or BatchingConfig()
    n_layers = max(r.n_layers for r in requests)
    if store is None:
        store = TieredBlockStore(
            store_cfg.capacity_slots, store_cfg.policy, store_cfg.eviction, n_layers=n_layers,
            block_size=engine.block_size, write_allocate=store_cfg.write_allocate,
        )
    for req in requests:
        req.tbt_ms, req.steps_done = [], 0
        req.admitted_at = req.finished_at = None
    admission = _Admission(store, engine.microbatch_size)
    for req in requests:
        if not admission.fits([req]):
            raise UnschedulableRequest(
                f"unschedulable request {req.request_id}: one iteration needs "
                f"{admission.demand([req])} slots, pool has {store.capacity()}"
            )

    pending = sorted(requests, key=lambda r: (r.arrival_time, r.request_id))
    waiting: list[Request] = []
    running: list[Request] = []
    released: set[int] = set()
    clock_ms = 0.0
    tbt, blocks_pq, totals_pq, coverage = [], [], [], []
    admissions = []
    seq_ms = pipe_ms = 0.0
    iterations = 0
    max_req = 0

    while pending or waiting or running:
        while pending and pending[0].arrival_time * 1000.0 <= clock_ms:
            waiting.append(pending.pop(0))
        while waiting and admission.fits(running + [waiting[0]]) and (
                batching.max_batch is None or len(running) < batching.max_batch):
            req = waiting.pop(0)
            for blocks in req.blocks:
                for block in blocks:
                    store.put_block(block, request_id=req.request_id)
            req.admitted_at = clock_ms / 1000.0
            admissions.append((req.admitted_at, req.request_id))
            running.append(req)
        demand = admission.total(running)
        assert admission.fits(running), "admitted requests exceed fast-pool capacity"
        max_req = max(max_req, demand)
        if not running:
            # Nothing fits only when idle and waiting for the next arrival.
            clock_ms = max(clock_ms, pending[0].arrival_time * 1000.0)
            continue

        step_seq = step_pipe = 0.0
        for layer in range(n_layers):
            batch = [r for r in running if layer < r.n_layers]
            log: list = []
            results = psa_attention_batched(
                [r.queries[layer, r.steps_done] for r in batch],
                [r.block_ids(layer) for r in batch],
                engine, store, topk=topk, pin=True, iteration_log=log,
                true_coverage=batching.audit_coverage,
            )
            loads, computes = _iteration_times(log, batching)
            step_seq += sum(loads) + sum(computes)
            step_pipe += pipelined_time(loads, computes)
            for res in results:
                assert not released.intersection(res.processed_ids)
                blocks_pq.append(res.blocks_processed)
                totals_pq.append(res.total_blocks)
                if res.true_coverage is not None:
                    coverage.append(res.true_coverage)
        step_ms = step_pipe if batching.pipelined else step_seq
        seq_ms += step_seq
        pipe_ms += step_pipe
        clock_ms += step_ms
        iterations += 1
        still = []
        for req in running:
            req.tbt_ms.append(step_ms)
            tbt.append(step_ms)
            req.steps_done += 1
            if req.finished:
                req.finished_at = clock_ms / 1000.0
                store.release_request(req.request_id)
                released.update(b for layer in range(req.n_layers) for b in req.block_ids(layer))
            else:
                still.append(req)
        running = still

    if method is None:
        method = "topk" if topk is not None else ("exact" if engine.epsilon >= 1.0 else "psa")
    return ServingReport(
        method=method,
        param=float(topk) if topk is not None else engine.epsilon,
        n_requests=len(requests),
        decode_iterations=iterations,
        tbt_ms=tbt,
        blocks_per_query=blocks_pq,
        total_blocks_per_query=totals_pq,
        coverage=coverage,
        stats=store.stats.copy(),
        sequential_ms=seq_ms,
        pipelined_ms=pipe_ms,
        admissions=admissions,
        max_requirement=max_req,
        capacity=store.capacity(),
        makespan_s=clock_ms / 1000.0,
    )
