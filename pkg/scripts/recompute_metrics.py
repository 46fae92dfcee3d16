#!/usr/bin/env python3
"""Recompute every metric in a report from its per-case decision log.

Deliberately independent of the package: only the standard library, its own
argmax with the smallest-id tie rule, and its own success rules. Exits 0 when
every recomputed rate equals the report's, 1 otherwise.

    python scripts/recompute_metrics.py runs/eval/decisions.jsonl runs/eval/report.json
"""

import argparse
import json
import math
import sys
from collections import defaultdict


def choose(candidates, scores, lowest=False):
    best = None
    for item, score in zip(candidates, scores):
        key = (score if lowest else -score, item)
        if best is None or key < best[0]:
            best = (key, item)
    return best[1]


def judge(row):
    """Return (prediction, success) re-derived from the logged scores."""
    metric = row["metric"]
    cands, scores = row["candidates"], row["scores"]
    if metric == "valid_ratio":
        # the vocabulary-wide winner is logged; it cannot lose to a candidate
        top = row["prediction"]
        if cands and row["vocab_top_score"] < max(scores):
            raise ValueError(f"user {row['user_id']} t={row['t']}: a candidate outscores the logged top item")
        return top, top in cands
    if metric == "aversion_accuracy":
        pred = choose(cands, scores, lowest=True)
        return pred, pred == row["avoid"]
    pred = choose(cands, scores)
    if metric == "avoidance_rate":
        return pred, pred != row["avoid"]
    if metric in ("hit_ratio_at1", "adherence_rate"):
        return pred, pred == row["target"]
    raise ValueError(f"unknown metric {metric!r}")


def recompute(rows):
    tally = defaultdict(lambda: [0, 0])
    mismatches = 0
    for row in rows:
        pred, ok = judge(row)
        if pred != row["prediction"] or ok != row["success"]:
            mismatches += 1
        tally[row["metric"]][0] += ok
        tally[row["metric"]][1] += 1
    return {m: {"successes": s, "evaluated": n, "rate": s / n} for m, (s, n) in tally.items()}, mismatches


def recompute_buckets(rows, bucket_rows):
    out = []
    hr = [r for r in rows if r["metric"] == "hit_ratio_at1"]
    for b in bucket_rows:
        inside = [
            r for r in hr
            if (b["low"] is None or r["history_length"] >= b["low"])
            and (b["high"] is None or r["history_length"] < b["high"])
        ]
        out.append((len(inside), sum(judge(r)[1] for r in inside)))
    rates = [s / n for n, s in out if n]
    cv = None
    if len(rates) >= 2:
        mean = sum(rates) / len(rates)
        if mean > 0:
            cv = math.sqrt(sum((x - mean) ** 2 for x in rates) / len(rates)) / mean
    return out, cv


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("decisions")
    ap.add_argument("report")
    args = ap.parse_args(argv)
    with open(args.decisions, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    with open(args.report, encoding="utf-8") as fh:
        report = json.load(fh)

    ok = True
    metrics, mismatches = recompute(rows)
    if mismatches:
        print(f"FAIL {mismatches} logged decision(s) disagree with their scores")
        ok = False
    names = sorted(set(metrics) | set(report["metrics"]))
    for name in names:
        mine, theirs = metrics.get(name), report["metrics"].get(name)
        same = mine is not None and theirs is not None and all(mine[k] == theirs[k] for k in ("successes", "evaluated", "rate"))
        ok &= same
        shown = "-" if mine is None else f"{mine['rate']:.6f} ({mine['successes']}/{mine['evaluated']})"
        print(f"{'ok  ' if same else 'FAIL'} {name:<18} {shown}")

    buckets = report.get("history_buckets")
    if buckets:
        counts, cv = recompute_buckets(rows, buckets["rows"])
        same = all(
            (n, s) == (b["count"], b["successes"]) for (n, s), b in zip(counts, buckets["rows"])
        )
        theirs = buckets.get("coefficient_of_variation")
        same &= (cv is None) == (theirs is None) and (cv is None or abs(cv - theirs) <= 1e-12)
        ok &= same
        print(f"{'ok  ' if same else 'FAIL'} history buckets    {len(counts)} rows")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
