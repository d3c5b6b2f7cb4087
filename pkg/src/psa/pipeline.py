"""Two-agent pipelined execution of a progressive attention call.

A loader thread fetches microbatch i+1 from the store while the compute
thread merges microbatch i. The hand-off holds one microbatch, and the
loader needs a credit, released when compute picks up a microbatch, before it
starts the next load, so lookahead never exceeds one microbatch. The compute
agent checks coverage itself and raises a one-shot stop flag; the loader
polls it before every load.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

from .engine import ProgressiveRun, PSAConfig, PSAResult


class StopSignal:
    """Set-once flag shared by the compute and loader agents."""

    def __init__(self):
        self._event = threading.Event()

    def set(self) -> None:
        self._event.set()

    def is_set(self) -> bool:
        return self._event.is_set()

    __bool__ = is_set


@dataclass
class PipelineTimings:
    load_times: list[float] = field(default_factory=list)
    compute_times: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    microbatches_loaded: int = 0
    blocks_loaded: int = 0
    blocks_computed: int = 0

    @property
    def sequential_equivalent(self) -> float:
        return sum(self.load_times) + sum(self.compute_times)

    @property
    def overlap_efficiency(self) -> float:
        return self.sequential_equivalent / self.wall_time if self.wall_time > 0 else 1.0

    @property
    def wasted_blocks(self) -> int:
        return self.blocks_loaded - self.blocks_computed


def _microbatches(run: ProgressiveRun) -> list[list[int]]:
    order = run.ranked[:run.limit]
    m = run.cfg.microbatch_size
    return [order[i:i + m] for i in range(0, len(order), m)]


def _make_run(q, block_ids, cfg, store, topk):
    return ProgressiveRun(q, block_ids, store, cfg, limit=topk, stop_on_coverage=topk is None)


def _compute(run: ProgressiveRun, blocks, compute_latency: float) -> float:
    t0 = time.perf_counter()
    run.consume(blocks)
    if compute_latency > 0:
        time.sleep(compute_latency)
    return time.perf_counter() - t0


def run_sequential(q, block_ids, cfg: PSAConfig, store, *, compute_latency: float = 0.0,
                   topk: int | None = None, true_coverage: bool = False
                   ) -> tuple[PSAResult, PipelineTimings]:
    """Load a microbatch, then compute it, strictly alternating."""
    run = _make_run(q, block_ids, cfg, store, topk)
    timings = PipelineTimings()
    start = time.perf_counter()
    for ids in _microbatches(run):
        t0 = time.perf_counter()
        blocks = [store.load_block(b, pin=True) for b in ids]
        timings.load_times.append(time.perf_counter() - t0)
        timings.microbatches_loaded += 1
        timings.blocks_loaded += len(ids)
        try:
            timings.compute_times.append(_compute(run, blocks, compute_latency))
        finally:
            store.unpin(ids)
        timings.blocks_computed += len(ids)
        if run.done:
            break
    timings.wall_time = time.perf_counter() - start
    return run.result(true_coverage), timings


def run_pipelined(q, block_ids, cfg: PSAConfig, store, *, compute_latency: float = 0.0,
                  topk: int | None = None, true_coverage: bool = False
                  ) -> tuple[PSAResult, PipelineTimings]:
    """Same result as :func:`run_sequential`, with loading overlapped."""
    run = _make_run(q, block_ids, cfg, store, topk)
    chunks = _microbatches(run)
    timings = PipelineTimings()
    stop = StopSignal()
    credit = threading.Semaphore(1)
    handoff: queue.Queue = queue.Queue(maxsize=1)

    def loader():
        try:
            for ids in chunks:
                credit.acquire()
                if stop:
                    return
                t0 = time.perf_counter()
                blocks = []
                try:
                    for b in ids:
                        blocks.append(store.load_block(b, pin=True))
                except BaseException:
                    store.unpin([blk.block_id for blk in blocks])
                    raise
                timings.load_times.append(time.perf_counter() - t0)
                timings.microbatches_loaded += 1
                timings.blocks_loaded += len(ids)
                handoff.put((ids, blocks))
        except BaseException as exc:  # surfaced by the compute agent
            handoff.put(exc)

    start = time.perf_counter()
    thread = threading.Thread(target=loader, name="psa-loader", daemon=True)
    thread.start()
    try:
        for _ in chunks:
            item = handoff.get()
            if isinstance(item, BaseException):
                raise item
            credit.release()
            ids, blocks = item
            try:
                timings.compute_times.append(_compute(run, blocks, compute_latency))
            finally:
                store.unpin(ids)
            timings.blocks_computed += len(ids)
            if run.done:
                break
    finally:
        stop.set()
        credit.release()
        thread.join()
        # A prefetched microbatch that was never computed still holds pins.
        while not handoff.empty():
            item = handoff.get_nowait()
            if not isinstance(item, BaseException):
                store.unpin(item[0])
    timings.wall_time = time.perf_counter() - start
    return run.result(true_coverage), timings
