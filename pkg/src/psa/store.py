"""Two-tier KV block store: a fixed pool of fast slots over a slow backing map.

The fast pool is either one slot pool shared by every layer (``UNIFIED``) or
``capacity // n_layers`` private slots per layer (``LAYER_PARTITIONED``).
Eviction is LRU or FIFO within the eviction domain. Blocks may be pinned while
a consumer reads them; pinned blocks are never chosen as victims.
"""

from __future__ import annotations

import enum
import threading
import time
from collections import Counter, OrderedDict, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .metadata import BlockMetadata, KVBlock, build_metadata


class Policy(str, enum.Enum):
    UNIFIED = "unified"
    LAYER_PARTITIONED = "layer_partitioned"


class Eviction(str, enum.Enum):
    LRU = "lru"
    FIFO = "fifo"


class FastPoolExhausted(RuntimeError):
    """Every slot in the eviction domain is pinned."""


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    bytes_transferred: int = 0
    layer_hits: Counter = field(default_factory=Counter)
    layer_misses: Counter = field(default_factory=Counter)
    layer_evictions: Counter = field(default_factory=Counter)
    layer_bytes: Counter = field(default_factory=Counter)

    @property
    def accesses(self) -> int:
        return self.hits + self.misses

    @property
    def hit_ratio(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0

    def copy(self) -> "CacheStats":
        return CacheStats(
            self.hits, self.misses, self.evictions, self.bytes_transferred,
            Counter(self.layer_hits), Counter(self.layer_misses),
            Counter(self.layer_evictions), Counter(self.layer_bytes),
        )

    def to_dict(self) -> dict:
        layers = sorted(set(self.layer_hits) | set(self.layer_misses) | set(self.layer_evictions))
        return {
            "hits": self.hits,
            "misses": self.misses,
            "evictions": self.evictions,
            "bytes_transferred": self.bytes_transferred,
            "hit_ratio": self.hit_ratio,
            "per_layer": {
                str(layer): {
                    "hits": self.layer_hits[layer],
                    "misses": self.layer_misses[layer],
                    "evictions": self.layer_evictions[layer],
                    "bytes_transferred": self.layer_bytes[layer],
                }
                for layer in layers
            },
        }


class TieredBlockStore:
    """Block storage with a bounded, recency-managed fast tier.

    ``load_latency`` is the number of seconds a miss sleeps to model the
    slow-tier transfer; it is the only source of real time in the store.
    All bookkeeping happens under one lock, so a loader thread and a compute
    thread may share a store.
    """

    def __init__(self, capacity_slots: int, policy=Policy.UNIFIED, eviction=Eviction.LRU,
                 n_layers: int = 1, block_size: int | None = None, load_latency: float = 0.0,
                 write_allocate: bool = True, record_trace: bool = False):
        if capacity_slots < 0:
            raise ValueError("capacity_slots must be >= 0")
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.policy = Policy(policy)
        self.eviction = Eviction(eviction)
        self.n_layers = n_layers
        self.block_size = block_size
        self.load_latency = load_latency
        self.write_allocate = write_allocate
        self.stats = CacheStats()
        self.trace: list[str] | None = [] if record_trace else None

        if self.policy is Policy.UNIFIED:
            self._capacity = {None: capacity_slots}
        else:
            per_layer = capacity_slots // n_layers
            self._capacity = {layer: per_layer for layer in range(n_layers)}
        self._pools: dict[int | None, OrderedDict] = {dom: OrderedDict() for dom in self._capacity}
        self._backing: dict[int, KVBlock] = {}
        self._meta: dict[int, BlockMetadata] = {}
        self._owner: dict[int, list[int]] = defaultdict(list)
        self._pins: Counter = Counter()
        self._seq = 0
        self._lock = threading.RLock()

    # -- slot accounting ---------------------------------------------------

    def _domain(self, layer_id: int):
        if self.policy is Policy.UNIFIED:
            return None
        if not 0 <= layer_id < self.n_layers:
            raise ValueError(f"layer {layer_id} outside partitioned store of {self.n_layers} layers")
        return layer_id

    def capacity(self, layer_id: int | None = None) -> int:
        if layer_id is None:
            return sum(self._capacity.values())
        return self._capacity[self._domain(layer_id)]

    def occupied(self, layer_id: int | None = None) -> int:
        with self._lock:
            if layer_id is None:
                return sum(len(p) for p in self._pools.values())
            return len(self._pools[self._domain(layer_id)])

    def free_slots(self, layer_id: int | None = None) -> int:
        return self.capacity(layer_id) - self.occupied(layer_id)

    def resident(self, block_id: int) -> bool:
        with self._lock:
            block = self._backing.get(block_id)
            return block is not None and block_id in self._pools[self._domain(block.layer_id)]

    def resident_ids(self, layer_id: int | None = None) -> list[int]:
        """Fast-pool contents of one domain, oldest (next victim) first."""
        with self._lock:
            dom = None if layer_id is None else self._domain(layer_id)
            return list(self._pools[dom])

    def payload_bytes(self, block: KVBlock) -> int:
        tokens = self.block_size or block.n_tokens
        return 2 * block.n_heads * tokens * block.d * block.keys.itemsize

    # -- block lifecycle ---------------------------------------------------

    def put_block(self, block: KVBlock, request_id: int | None = None,
                  allocate: bool | None = None) -> None:
        """Store a full block in the slow tier and index its metadata.

        With write-allocate the block is also placed in the fast pool, as if
        it had just been written there before being flushed.
        """
        if request_id is None:
            request_id = block.request_id
        with self._lock:
            if block.block_id in self._backing:
                raise KeyError(f"duplicate block id {block.block_id}")
            dom = self._domain(block.layer_id)
            self._backing[block.block_id] = block
            self._meta[block.block_id] = build_metadata(block)
            if request_id is not None:
                self._owner[request_id].append(block.block_id)
            if self.write_allocate if allocate is None else allocate:
                try:
                    self._insert(dom, block.block_id, block.layer_id)
                except FastPoolExhausted:
                    pass

    def _insert(self, dom, block_id: int, layer_id: int):
        """Place ``block_id`` in a slot of ``dom``; returns the evicted id, if any."""
        pool = self._pools[dom]
        cap = self._capacity[dom]
        if cap == 0:
            return None
        victim = None
        if len(pool) >= cap:
            victim = next((b for b in pool if self._pins[b] == 0), None)
            if victim is None:
                raise FastPoolExhausted(f"all {cap} slots pinned in domain {dom}")
            del pool[victim]
            victim_layer = self._backing[victim].layer_id
            self.stats.evictions += 1
            self.stats.layer_evictions[victim_layer] += 1
        pool[block_id] = None
        return victim

    def load_block(self, block_id: int, layer_id: int | None = None, pin: bool = False) -> KVBlock:
        """Fetch a block, promoting it into the fast pool on a miss."""
        with self._lock:
            block = self._backing.get(block_id)
            if block is None:
                raise KeyError(f"unknown block id {block_id}")
            if layer_id is not None and layer_id != block.layer_id:
                raise ValueError(f"block {block_id} belongs to layer {block.layer_id}, not {layer_id}")
            layer = block.layer_id
            dom = self._domain(layer)
            pool = self._pools[dom]
            hit = block_id in pool
            victim = None
            if hit:
                self.stats.hits += 1
                self.stats.layer_hits[layer] += 1
                if self.eviction is Eviction.LRU:
                    pool.move_to_end(block_id)
            else:
                self.stats.misses += 1
                self.stats.layer_misses[layer] += 1
                nbytes = self.payload_bytes(block)
                self.stats.bytes_transferred += nbytes
                self.stats.layer_bytes[layer] += nbytes
                victim = self._insert(dom, block_id, layer)
            if pin:
                self._pins[block_id] += 1
            if self.trace is not None:
                self.trace.append(
                    f"{self._seq},{layer},{block_id},{'hit' if hit else 'miss'},"
                    f"{'-' if victim is None else victim}"
                )
            self._seq += 1
        if not hit and self.load_latency > 0:
            time.sleep(self.load_latency)
        return block

    def unpin(self, block_ids) -> None:
        with self._lock:
            for b in block_ids:
                if self._pins[b] <= 0:
                    raise ValueError(f"block {b} is not pinned")
                self._pins[b] -= 1
                if self._pins[b] == 0:
                    del self._pins[b]

    def pinned(self) -> int:
        with self._lock:
            return sum(1 for c in self._pins.values() if c > 0)

    def peek(self, block_id: int) -> KVBlock:
        """Read a block without touching the fast pool or the stats."""
        with self._lock:
            try:
                return self._backing[block_id]
            except KeyError:
                raise KeyError(f"unknown block id {block_id}") from None

    def metadata(self, block_id: int) -> BlockMetadata:
        with self._lock:
            try:
                return self._meta[block_id]
            except KeyError:
                raise KeyError(f"unknown block id {block_id}") from None

    def metadata_nbytes(self) -> int:
        with self._lock:
            return sum(m.nbytes for m in self._meta.values())

    def release_request(self, request_id: int) -> int:
        """Drop every block owned by ``request_id`` from both tiers.

        Returns the number of fast-pool slots freed.
        """
        with self._lock:
            if request_id not in self._owner:
                raise KeyError(f"unknown request {request_id}")
            freed = 0
            for block_id in self._owner.pop(request_id):
                block = self._backing.pop(block_id)
                del self._meta[block_id]
                self._pins.pop(block_id, None)
                pool = self._pools[self._domain(block.layer_id)]
                if block_id in pool:
                    del pool[block_id]
                    freed += 1
            return freed

    def requests(self) -> list[int]:
        with self._lock:
            return sorted(self._owner)

    def __len__(self) -> int:
        return len(self._backing)

    def __contains__(self, block_id) -> bool:
        return block_id in self._backing

    def reset_stats(self) -> None:
        with self._lock:
            self.stats = CacheStats()

    def dump_trace(self, path) -> None:
        if self.trace is None:
            raise RuntimeError("store was created without record_trace=True")
        with open(path, "w") as fh:
            fh.writelines(line + "\n" for line in self.trace)


def replay_trace(accesses, capacity_slots: int, policy=Policy.UNIFIED, eviction=Eviction.LRU,
                 n_layers: int | None = None, record_trace: bool = False) -> TieredBlockStore:
    """Replay ``(layer_id, block_id)`` accesses against an empty fast pool.

    Blocks are registered lazily in the slow tier with a one-token payload;
    only the slot bookkeeping matters here. Returns the store for its stats.
    """
    accesses = list(accesses)
    if n_layers is None:
        n_layers = 1 + max(layer for layer, _ in accesses)
    store = TieredBlockStore(capacity_slots, policy, eviction, n_layers=n_layers,
                             write_allocate=False, record_trace=record_trace)
    payload = np.zeros((1, 1), dtype=np.float32)
    for layer, block_id in accesses:
        if block_id not in store:
            store.put_block(KVBlock(block_id, layer, payload, payload))
        store.load_block(block_id, layer)
    return store
