"""Benchmark scenarios: method comparison, fixed-coverage trade-off, self-test.

Scenario files are INI-style (``[section]`` headers, ``key = value`` lines)
and parsed with :mod:`configparser`. See ``scenarios/smoke.cfg`` for every
recognized key.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attention import (
    SoftmaxAccumulator,
    block_partial_attention,
    exact_attention,
    finalize,
    merge_partial,
)
from .engine import PSAConfig, coverage_curve, psa_attention, topk_attention
from .metadata import Estimator, KVBlock
from .serving import BatchingConfig, StoreConfig, WorkloadSpec, generate_workload, run_serving
from .store import Policy, TieredBlockStore, replay_trace

OUTPUT_DIR_ENV = "PSA_OUTPUT_DIR"

RUN_COLUMNS = [
    "method", "param", "mean_blocks", "p99_blocks", "kv_fraction", "mean_coverage",
    "min_coverage", "hit_ratio", "tbt_p50_ms", "tbt_p99_ms", "overlap_eff",
]
TRADEOFF_COLUMNS = [
    "target_coverage", "uniform_k", "topk_mean_blocks", "topk_min_coverage",
    "psa_mean_blocks", "psa_mean_coverage", "psa_min_coverage", "ratio", "n_queries",
]
METHODS = ("exact", "psa", "topk", "psa_layer_partitioned")


class ConfigError(ValueError):
    pass


class InvariantViolation(AssertionError):
    pass


@dataclass
class ScenarioConfig:
    name: str
    workload: WorkloadSpec
    engine: PSAConfig
    store: StoreConfig
    batching: BatchingConfig
    epsilons: list[float] = field(default_factory=lambda: [0.8, 0.9, 0.95, 0.99])
    ks: list[int] = field(default_factory=lambda: [4, 8, 16])
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    target_coverage: float = 0.95
    output_path: Path = Path("report.json")
    report_format: str = "json"

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"no such scenario file: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read(path)
            return cls._from_parser(parser, path.stem)
        except (configparser.Error, ValueError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    @classmethod
    def from_string(cls, text: str, name: str = "scenario") -> "ScenarioConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text)
            return cls._from_parser(parser, name)
        except (configparser.Error, ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def _from_parser(cls, p: configparser.ConfigParser, name: str) -> "ScenarioConfig":
        known = {"workload", "engine", "store", "batching", "sweep", "tradeoff", "output"}
        unknown = set(p.sections()) - known
        if unknown:
            raise ConfigError(f"unknown sections: {sorted(unknown)}")
        w = p["workload"] if p.has_section("workload") else {}
        ctx = _floats(w.get("context_tokens", "2048"))
        workload = WorkloadSpec(
            n_requests=int(w.get("n_requests", 4)),
            n_layers=int(w.get("n_layers", 2)),
            head_dim=int(w.get("head_dim", 64)),
            block_size=int(w.get("block_size", 32)),
            context_tokens=(int(ctx[0]), int(ctx[-1])),
            decode_steps=int(w.get("decode_steps", 8)),
            skew=_floats(w.get("skew", "6.0")),
            planted_fraction=_floats(w.get("planted_fraction", "0.1")),
            planted_spread=float(w.get("planted_spread", 0.5)),
            rho=float(w.get("rho", 0.9)),
            arrival_rate=float(w.get("arrival_rate", "inf")),
            seed=int(w.get("seed", 0)),
        )
        workload.validate()
        e = p["engine"] if p.has_section("engine") else {}
        engine = PSAConfig(
            epsilon=float(e.get("epsilon", 0.95)),
            microbatch_size=int(e.get("microbatch_size", 4)),
            block_size=workload.block_size,
            estimator=e.get("estimator", "cuboid_mean"),
            ranking_mode=e.get("ranking_mode", "estimated"),
        )
        s = p["store"] if p.has_section("store") else {}
        store = StoreConfig(
            capacity_slots=int(s.get("capacity_slots", 256)),
            policy=s.get("policy", "unified"),
            eviction=s.get("eviction", "lru"),
            write_allocate=_bool(s.get("write_allocate", "true")),
        )
        b = p["batching"] if p.has_section("batching") else {}
        max_batch = b.get("max_batch", "none")
        batching = BatchingConfig(
            load_ms_per_block=float(b.get("load_ms_per_block", 0.05)),
            compute_ms_per_block=float(b.get("compute_ms_per_block", 0.01)),
            iteration_overhead_ms=float(b.get("iteration_overhead_ms", 0.02)),
            pipelined=_bool(b.get("pipelined", "true")),
            max_batch=None if max_batch.lower() == "none" else int(max_batch),
        )
        sw = p["sweep"] if p.has_section("sweep") else {}
        epsilons = _floats(sw.get("epsilons", "0.8, 0.9, 0.95, 0.99"))
        ks = [int(k) for k in _floats(sw.get("ks", "4, 8, 16"))]
        methods = [m.strip() for m in sw.get("methods", ",".join(METHODS)).split(",") if m.strip()]
        if not epsilons or not ks:
            raise ConfigError("sweep lists must be nonempty")
        for eps in epsilons:
            PSAConfig(epsilon=eps)
        if any(k < 1 for k in ks):
            raise ConfigError("ks must be >= 1")
        bad = set(methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        t = p["tradeoff"] if p.has_section("tradeoff") else {}
        target = float(t.get("target_coverage", 0.95))
        if not 0.0 < target <= 1.0:
            raise ConfigError("target_coverage must be in (0, 1]")
        o = p["output"] if p.has_section("output") else {}
        fmt = o.get("format", "json").lower()
        if fmt not in ("json", "csv"):
            raise ConfigError(f"format must be json or csv, got {fmt!r}")
        return cls(
            name=name, workload=workload, engine=engine, store=store, batching=batching,
            epsilons=epsilons, ks=ks, methods=methods, target_coverage=target,
            output_path=Path(o.get("path", f"{name}_report.{fmt}")), report_format=fmt,
        )

    def resolve_output(self, suffix: str = "") -> Path:
        path = self.output_path
        if suffix:
            path = path.with_name(f"{path.stem}{suffix}{path.suffix}")
        override = os.environ.get(OUTPUT_DIR_ENV)
        if override:
            path = Path(override) / path.name
        return path


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _row(method: str, param, report) -> dict:
    d = report.to_dict()
    return {
        "method": method,
        "param": param,
        "mean_blocks": d["blocks_per_query"]["mean"],
        "p99_blocks": d["blocks_per_query"]["p99"],
        "kv_fraction": d["kv_fraction"],
        "mean_coverage": d["coverage"]["mean"],
        "min_coverage": d["coverage"]["min"],
        "hit_ratio": d["cache"]["hit_ratio"],
        "tbt_p50_ms": d["tbt_ms"]["p50"],
        "tbt_p99_ms": d["tbt_ms"]["p99"],
        "overlap_eff": d["overlap_efficiency"],
    }


def comparison_rows(cfg: ScenarioConfig) -> list[dict]:
    """Serve the scenario once per (method, parameter) and tabulate."""
    requests = generate_workload(cfg.workload)
    rows = []

    def serve(method, engine, store=cfg.store, topk=None):
        return run_serving(requests, engine, store, cfg.batching, topk=topk, method=method)

    if "exact" in cfg.methods:
        rows.append(_row("exact", 1.0, serve("exact", replace(cfg.engine, epsilon=1.0))))
    for eps in cfg.epsilons:
        engine = replace(cfg.engine, epsilon=eps)
        if "psa" in cfg.methods:
            rows.append(_row("psa", eps, serve("psa", engine)))
        if "psa_layer_partitioned" in cfg.methods:
            partitioned = replace(cfg.store, policy=Policy.LAYER_PARTITIONED)
            rows.append(_row("psa_layer_partitioned", eps, serve("psa_layer_partitioned", engine, partitioned)))
    if "topk" in cfg.methods:
        for k in cfg.ks:
            rows.append(_row("topk", k, serve("topk", cfg.engine, topk=k)))
    return rows


def render(payload: dict, columns: list[str], rows: list[dict], fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: ("" if row[c] is None else row[c]) for c in columns})
        return buf.getvalue()
    return json.dumps({**payload, "columns": columns, "rows": rows}, indent=2, sort_keys=True) + "\n"


def cmd_run(cfg: ScenarioConfig) -> tuple[Path, list[dict]]:
    rows = comparison_rows(cfg)
    out = cfg.resolve_output()
    payload = {"scenario": cfg.name, "seed": cfg.workload.seed}
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render(payload, RUN_COLUMNS, rows, cfg.report_format))
    return out, rows


# -- fixed-coverage trade-off ------------------------------------------------

def _query_set(cfg: ScenarioConfig):
    """Every (request, layer, step) query with its block list, over one store."""
    requests = generate_workload(cfg.workload)
    store = TieredBlockStore(0, n_layers=cfg.workload.n_layers, write_allocate=False)
    queries = []
    for req in requests:
        for layer in range(req.n_layers):
            for block in req.blocks[layer]:
                store.put_block(block, request_id=req.request_id)
            ids = req.block_ids(layer)
            for step in range(req.decode_steps):
                queries.append((req.queries[layer, step], ids))
    return store, queries


def smallest_uniform_k(curves, target: float) -> int:
    """Smallest k whose worst-query top-k coverage reaches ``target`` (bisection)."""
    def worst(k):
        return min(c[min(k, len(c)) - 1] for c in curves)

    lo, hi = 1, max(len(c) for c in curves)
    while lo < hi:
        mid = (lo + hi) // 2
        if worst(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    if worst(lo) < target:
        raise InvariantViolation(f"even k={lo} misses coverage {target}")
    if lo > 1 and worst(lo - 1) >= target:
        raise InvariantViolation(f"k={lo} is not minimal for coverage {target}")
    return lo


def tradeoff(cfg: ScenarioConfig) -> dict:
    """Blocks needed by uniform top-k vs PSA to reach the same coverage target."""
    target = cfg.target_coverage
    store, queries = _query_set(cfg)
    engine = replace(cfg.engine, epsilon=target)
    curves = [coverage_curve(q, ids, store, engine) for q, ids in queries]
    k = smallest_uniform_k(curves, target)
    topk_blocks = [min(k, len(c)) for c in curves]
    topk_cov = [c[n - 1] for c, n in zip(curves, topk_blocks)]
    psa = [psa_attention(q, ids, engine, store, true_coverage=True) for q, ids in queries]
    psa_blocks = [r.blocks_processed for r in psa]
    psa_cov = [r.true_coverage for r in psa]
    return {
        "target_coverage": target,
        "uniform_k": k,
        "topk_mean_blocks": float(np.mean(topk_blocks)),
        "topk_min_coverage": float(np.min(topk_cov)),
        "psa_mean_blocks": float(np.mean(psa_blocks)),
        "psa_mean_coverage": float(np.mean(psa_cov)),
        "psa_min_coverage": float(np.min(psa_cov)),
        "ratio": float(np.mean(topk_blocks) / np.mean(psa_blocks)),
        "n_queries": len(queries),
    }


def cmd_tradeoff(cfg: ScenarioConfig) -> tuple[Path, dict]:
    row = tradeoff(cfg)
    out = cfg.resolve_output("_tradeoff")
    payload = {"scenario": cfg.name, "seed": cfg.workload.seed}
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render(payload, TRADEOFF_COLUMNS, [row], cfg.report_format))
    return out, row


# -- oracle self-test --------------------------------------------------------

def relative_error(approx, exact) -> float:
    exact = np.asarray(exact, dtype=np.float64)
    diff = np.linalg.norm(np.asarray(approx, dtype=np.float64) - exact)
    return float(diff / np.linalg.norm(exact))


def equivalence_suite(d: int = 64, n_blocks: int = 128, block_size: int = 32, seed: int = 0,
                      trials: int = 5, permutations: int = 20, corrupt: bool = False) -> dict:
    """Engine path vs float64 oracle on random instances.

    Checks blockwise merge exactness, permutation invariance, log-mass
    additivity, large-score stability, and PSA(eps=1) / top-k(all) exactness.
    ``corrupt`` perturbs one value row on the engine side as a negative control.
    """
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(d)
    errors = {"merge": 0.0, "permutation": 0.0, "additivity": 0.0, "stability": 0.0, "engine": 0.0}

    for _ in range(trials):
        n = n_blocks * block_size
        keys = rng.standard_normal((n, d)).astype(np.float32)
        values = rng.standard_normal((n, d)).astype(np.float32)
        q = rng.standard_normal(d)
        oracle = exact_attention(q, keys, values, scale)
        engine_values = values.copy()
        if corrupt:
            engine_values[0] += np.float32(1.0)
        blocks = [KVBlock(i, 0, keys[i * block_size:(i + 1) * block_size],
                          engine_values[i * block_size:(i + 1) * block_size])
                  for i in range(n_blocks)]
        parts = [block_partial_attention(q, b, scale) for b in blocks]

        def merged(order):
            acc = SoftmaxAccumulator.empty(d)
            for i in order:
                acc = merge_partial(acc, parts[i])
            return acc

        base = finalize(merged(range(n_blocks)))
        errors["merge"] = max(errors["merge"], relative_error(base, oracle))
        for _ in range(permutations):
            out = finalize(merged(rng.permutation(n_blocks)))
            errors["permutation"] = max(errors["permutation"], relative_error(out, base))

        # Additivity in float64: merged log-mass vs direct sum of block masses.
        parts64 = [block_partial_attention(q, KVBlock(b.block_id, 0, b.keys.astype(np.float64),
                                                      b.values.astype(np.float64)), scale)
                   for b in blocks]
        acc = SoftmaxAccumulator.empty(d, np.float64)
        for part in parts64:
            acc = merge_partial(acc, part)
        direct = math.fsum(math.exp(p.log_as) for p in parts64)
        errors["additivity"] = max(errors["additivity"], abs(math.exp(acc.log_as_acc) / direct - 1.0))

        # Token 0 scores exactly 300 against an all-ones query; naive exp overflows.
        signs = np.sign(rng.standard_normal((block_size, d)))
        signs[0] = 1.0
        big = KVBlock(0, 0, (signs * (300.0 / (scale * d))).astype(np.float32), engine_values[:block_size])
        q_big = np.ones(d)
        part = block_partial_attention(q_big, big, scale)
        out = finalize(merge_partial(SoftmaxAccumulator.empty(d), part))
        if np.all(np.isfinite(out)) and math.isfinite(part.log_as):
            ref = exact_attention(q_big, big.keys, values[:block_size], scale)
            errors["stability"] = max(errors["stability"], relative_error(out, ref))
        else:
            errors["stability"] = math.inf

        store = TieredBlockStore(n_blocks, write_allocate=False)
        for b in blocks:
            store.put_block(b)
        ids = list(range(n_blocks))
        full = psa_attention(q, ids, PSAConfig(epsilon=1.0, block_size=block_size, scale=scale), store)
        top = topk_attention(q, ids, n_blocks, Estimator.CUBOID_MEAN, store, scale=scale)
        errors["engine"] = max(errors["engine"], relative_error(full.output, oracle),
                               relative_error(top.output, oracle))

    return errors


EQUIVALENCE_TOLERANCES = {
    "merge": 1e-5, "permutation": 1e-5, "additivity": 1e-10, "stability": 1e-5, "engine": 1e-5,
}


# -- fast-pool policy comparison ---------------------------------------------

def layer_working_set_trace(capacity: int, shares=(0.9, 0.1), rounds: int = 20, seed: int = 0):
    """Cyclic per-layer working sets sized as ``shares`` of the pool.

    Each round touches every block of every layer once, in a fresh random
    order, interleaving layers like consecutive decode steps would.
    """
    rng = np.random.default_rng(seed)
    sets = []
    next_id = 0
    for layer, share in enumerate(shares):
        size = max(1, int(round(share * capacity)))
        sets.append([(layer, next_id + i) for i in range(size)])
        next_id += size
    trace = []
    for _ in range(rounds):
        for ws in sets:
            trace.extend(ws[i] for i in rng.permutation(len(ws)))
    return trace


def pool_comparison(capacity: int = 64, shares=(0.9, 0.1), rounds: int = 20, seed: int = 0,
                    eviction: str = "lru") -> dict:
    trace = layer_working_set_trace(capacity, shares, rounds, seed)
    out = {}
    for policy in Policy:
        store = replay_trace(trace, capacity, policy, eviction, n_layers=len(shares))
        out[policy.value] = store.stats.hit_ratio
    return out
