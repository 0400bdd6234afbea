#!/usr/bin/env python3
"""Brute-force metric oracle.

Reads a JSON file holding per-user score vectors, targets, optional candidate
sets, and a metrics map produced by the library, then recomputes every metric
from first principles (explicit sorting) and verifies agreement: HR and MRR to
1e-12, nDCG to 1e-9. Exits non-zero on any mismatch.
"""
import json
import math
import sys


def rank_of(scores, target, candidates):
    if candidates is None:
        candidates = range(len(scores))
    pool = sorted(candidates, key=lambda j: (-scores[j], j))
    return pool.index(target) + 1


def compute(name, ranks):
    n = len(ranks)
    if name.startswith("HR@"):
        k = int(name[3:])
        return sum(1 for r in ranks if r <= k) / n
    if name.startswith("nDCG@"):
        k = int(name[5:])
        return sum(1.0 / math.log2(r + 1) for r in ranks if r <= k) / n
    if name == "MRR":
        return sum(1.0 / r for r in ranks) / n
    raise ValueError(f"unknown metric {name}")


def main(path):
    with open(path) as f:
        payload = json.load(f)
    failures = 0
    for case in payload["cases"]:
        scores = case["scores"]
        targets = case["targets"]
        candidates = case.get("candidates")
        ranks = []
        for u, target in enumerate(targets):
            cand = candidates[u] if candidates else None
            ranks.append(rank_of(scores[u], target, cand))
        if "ranks" in case:
            if ranks != case["ranks"]:
                print(f"rank mismatch: oracle {ranks} vs library {case['ranks']}")
                failures += 1
        for name, reported in case["metrics"].items():
            expected = compute(name, ranks)
            tol = 1e-9 if name.startswith("nDCG") else 1e-12
            if abs(expected - reported) > tol:
                print(f"{name}: oracle {expected!r} vs library {reported!r}")
                failures += 1
    if failures:
        print(f"{failures} mismatch(es)")
        return 1
    print("oracle: all metrics match")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1]))
