"""Command-line entry point.

    psa-bench run <cfg>          serve the scenario with every method and sweep value
    psa-bench tradeoff <cfg>     uniform top-k vs PSA blocks at a fixed coverage target
    psa-bench equivalence        engine-vs-oracle self-test

Exit codes: 0 success, 1 configuration error, 2 invariant or tolerance failure.
Set PSA_OUTPUT_DIR to redirect report files.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import bench
from .serving import UnschedulableRequest

log = logging.getLogger("psa")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2


def _run(args) -> int:
    cfg = bench.ScenarioConfig.from_file(args.config)
    out, rows = bench.cmd_run(cfg)
    for row in rows:
        print(f"{row['method']:<22} {row['param']:<6} blocks={row['mean_blocks']:8.2f} "
              f"kv={row['kv_fraction']:.3f} hit={row['hit_ratio']:.3f} "
              f"tbt_p99={row['tbt_p99_ms']:.3f}ms")
    exact = [r for r in rows if r["method"] == "exact"]
    if exact and exact[0]["kv_fraction"] != 1.0:
        log.error("exact method read %.6f of the KV cache, expected 1.0", exact[0]["kv_fraction"])
        return EXIT_INVARIANT
    for method in ("psa", "psa_layer_partitioned"):
        blocks = [r["mean_blocks"] for r in rows if r["method"] == method]
        if any(b > a for a, b in zip(blocks[1:], blocks)):
            log.error("%s blocks accessed decrease as epsilon grows: %s", method, blocks)
            return EXIT_INVARIANT
    print(f"report written to {out}")
    return EXIT_OK


def _tradeoff(args) -> int:
    cfg = bench.ScenarioConfig.from_file(args.config)
    out, row = bench.cmd_tradeoff(cfg)
    print(f"target coverage {row['target_coverage']}: uniform k={row['uniform_k']} "
          f"({row['topk_mean_blocks']:.2f} blocks/query) vs PSA {row['psa_mean_blocks']:.2f} "
          f"blocks/query -> reduction {row['ratio']:.3f}x")
    print(f"report written to {out}")
    return EXIT_OK


def _equivalence(args) -> int:
    errors = bench.equivalence_suite(
        d=args.d, n_blocks=args.blocks, block_size=args.block_size, seed=args.seed,
        trials=args.trials, corrupt=args.corrupt,
    )
    failed = False
    for name, err in errors.items():
        tol = bench.EQUIVALENCE_TOLERANCES[name]
        ok = err <= tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<12} max relative error {err:.3e} (tol {tol:.0e})")
    print(f"max relative error {max(errors.values()):.3e}")
    return EXIT_INVARIANT if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psa-bench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="compare exact / PSA / top-k on a scenario")
    p.add_argument("config")
    p.set_defaults(func=_run)

    p = sub.add_parser("tradeoff", help="KV blocks at a fixed coverage target")
    p.add_argument("config")
    p.set_defaults(func=_tradeoff)

    p = sub.add_parser("equivalence", help="engine vs exact-attention oracle self-test")
    p.add_argument("--d", type=int, default=64, help="head dimension")
    p.add_argument("--blocks", type=int, default=128)
    p.add_argument("--block-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--corrupt", action="store_true", help="negative control; must fail")
    p.set_defaults(func=_equivalence)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except bench.ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except UnschedulableRequest as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except bench.InvariantViolation as exc:
        log.error("invariant violated: %s", exc)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
