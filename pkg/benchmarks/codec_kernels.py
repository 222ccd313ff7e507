"""Compare the compiled key-rewrite kernel against the pure-Python fallback.

The key rewrite runs on every proxied request and response, so it is the one
CPU-bound loop in the package. This script times both kernels over the same
seeded workload and prints documents/second plus the speedup ratio.

Usage: python benchmarks/codec_kernels.py [--docs 2000] [--depth 5] [--repeat 3]
"""

from __future__ import annotations

import argparse
import random
import time

from wotgw import codec
from wotgw._kernel_py import rewrite_keys as rewrite_py

try:
    from wotgw._kernel_cy import rewrite_keys as rewrite_cy
except ImportError:
    rewrite_cy = None

KEYS = ["NoOfDevices", "deviceName", "currentWatts", "maxWattage", "KWh",
        "status", "values", "reading", "unit", "ts"]
TABLE = {"NoOfDevices": "ND", "deviceName": "DN", "currentWatts": "CW", "maxWattage": "MW"}
FORBIDDEN = frozenset(TABLE.values())


def make_doc(rng: random.Random, depth: int):
    if depth == 0 or rng.random() < 0.3:
        return rng.choice([None, True, False, rng.randint(-1000, 1000),
                           rng.random() * 100, "reading-" + str(rng.randint(0, 99))])
    if rng.random() < 0.5:
        return [make_doc(rng, depth - 1) for _ in range(rng.randint(0, 4))]
    return {rng.choice(KEYS) + str(i): make_doc(rng, depth - 1) for i in range(rng.randint(1, 5))}


def time_kernel(fn, docs, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for doc in docs:
            fn(doc, TABLE, FORBIDDEN)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--docs", type=int, default=2000)
    parser.add_argument("--depth", type=int, default=5)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    rng = random.Random(args.seed)
    docs = [make_doc(rng, args.depth) for _ in range(args.docs)]
    print(f"workload: {args.docs} documents, depth <= {args.depth}, best of {args.repeat}")
    print(f"active kernel in this interpreter: {codec.active_kernel()}")

    t_py = time_kernel(rewrite_py, docs, args.repeat)
    print(f"pure python : {t_py * 1e3:8.2f} ms  ({args.docs / t_py:10.0f} docs/s)")
    if rewrite_cy is None:
        print("compiled    : not built (pip install -e . with Cython available)")
        return 0
    sample = docs[: min(200, len(docs))]
    for doc in sample:
        assert rewrite_cy(doc, TABLE, FORBIDDEN) == rewrite_py(doc, TABLE, FORBIDDEN)
    t_cy = time_kernel(rewrite_cy, docs, args.repeat)
    print(f"compiled    : {t_cy * 1e3:8.2f} ms  ({args.docs / t_cy:10.0f} docs/s)")
    print(f"speedup     : {t_py / t_cy:8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
