"""Metric suite: HR@1, Valid Ratio, adherence, avoidance, aversion, history-length buckets.

Every metric keeps a per-case decision log carrying the candidate scores it
was decided from, so the rates can be recomputed independently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .config import HistoryMode, RunConfig, config_to_dict
from .pipeline import EvalCase
from .policy import PolicyParams, encode_contexts, forward_logprobs

REPORT_SCHEMA_VERSION = 1
METRIC_NAMES = ("hit_ratio_at1", "valid_ratio", "adherence_rate", "avoidance_rate", "aversion_accuracy")
AVERSION_NOTE = "aversion_accuracy uses argmin of candidate log-probabilities as a stand-in for asking the model"


class Scorer(Protocol):
    vocab: tuple[int, ...]

    def score_cases(self, cases: Sequence[EvalCase]) -> np.ndarray:
        """len(cases) x V scores aligned with ``vocab``; higher means more likely."""
        ...


@dataclass
class PolicyScorer:
    params: PolicyParams
    history_mode: HistoryMode = HistoryMode.FULL
    include_scores: bool = True
    max_history: int | None = None
    chunk: int = 512

    @classmethod
    def from_config(cls, params: PolicyParams, cfg: RunConfig) -> "PolicyScorer":
        return cls(params, cfg.data.history_mode, cfg.data.include_scores, cfg.policy.max_history)

    @property
    def vocab(self) -> tuple[int, ...]:
        return self.params.vocab

    def score_cases(self, cases: Sequence[EvalCase]) -> np.ndarray:
        index = self.params.index()
        out = []
        for start in range(0, len(cases), self.chunk):
            part = cases[start : start + self.chunk]
            batch = encode_contexts(
                [(c.sequence, c.cut) for c in part], index, self.history_mode, self.include_scores, self.max_history
            )
            out.append(forward_logprobs(self.params, batch))
        return np.concatenate(out) if out else np.zeros((0, len(self.vocab)))


@dataclass
class FunctionScorer:
    """Scorer from a plain per-case function; used for oracle and fixture policies."""

    vocab: tuple[int, ...]
    fn: Callable[[EvalCase], np.ndarray]

    def score_cases(self, cases: Sequence[EvalCase]) -> np.ndarray:
        return np.array([np.asarray(self.fn(c), dtype=float) for c in cases]).reshape(len(cases), len(self.vocab))


def pick(items: Sequence[int], scores: Sequence[float], lowest: bool = False) -> int:
    """Argmax (or argmin) item; ties go to the smallest item id."""
    items_a = np.asarray(items)
    s = np.asarray(scores, dtype=float)
    order = np.lexsort((items_a, s if lowest else -s))
    return int(items_a[order[0]])


@dataclass
class MetricResult:
    name: str
    successes: int
    evaluated: int
    decisions: list[dict] = field(default_factory=list)

    @property
    def rate(self) -> float | None:
        return self.successes / self.evaluated if self.evaluated else None


def _candidate_scores(scorer: Scorer, cases: Sequence[EvalCase]) -> tuple[np.ndarray, list[np.ndarray]]:
    table = scorer.score_cases(cases)
    index = {item: i for i, item in enumerate(scorer.vocab)}
    per_case = [table[r, [index[i] for i in c.candidates.items]] for r, c in enumerate(cases)]
    return table, per_case


def _decision(metric: str, case: EvalCase, scores: np.ndarray, prediction: int, success: bool, **extra) -> dict:
    cs = case.candidates
    row = {
        "metric": metric,
        "user_id": cs.user_id,
        "t": cs.cut,
        "history_length": case.history_length,
        "candidates": list(cs.items),
        "scores": [float(x) for x in scores],
        "target": cs.ground_truth,
        "avoid": cs.avoid_item,
        "prediction": prediction,
        "success": success,
    }
    row.update(extra)
    return row


def _candidate_metric(
    name: str,
    scorer: Scorer,
    cases: Sequence[EvalCase],
    success: Callable[[EvalCase, int], bool],
    lowest: bool = False,
) -> MetricResult:
    result = MetricResult(name, 0, 0)
    if not cases:
        return result
    _, per_case = _candidate_scores(scorer, cases)
    for case, scores in zip(cases, per_case):
        pred = pick(case.candidates.items, scores, lowest)
        ok = bool(success(case, pred))
        result.successes += ok
        result.evaluated += 1
        result.decisions.append(_decision(name, case, scores, pred, ok))
    return result


def hit_ratio_at1(scorer: Scorer, cases: Sequence[EvalCase]) -> MetricResult:
    return _candidate_metric("hit_ratio_at1", scorer, cases, lambda c, p: p == c.candidates.ground_truth)


def adherence_rate(scorer: Scorer, cases: Sequence[EvalCase]) -> MetricResult:
    """Success iff the top candidate is the smallest-latency future high item (the ground truth)."""
    return _candidate_metric("adherence_rate", scorer, cases, lambda c, p: p == c.candidates.ground_truth)


def avoidance_rate(scorer: Scorer, cases: Sequence[EvalCase]) -> MetricResult:
    return _candidate_metric("avoidance_rate", scorer, cases, lambda c, p: p != c.candidates.avoid_item)


def aversion_accuracy(scorer: Scorer, cases: Sequence[EvalCase]) -> MetricResult:
    return _candidate_metric(
        "aversion_accuracy", scorer, cases, lambda c, p: p == c.candidates.avoid_item, lowest=True
    )


def valid_ratio(scorer: Scorer, cases: Sequence[EvalCase]) -> MetricResult:
    """Share of cases whose unrestricted top item (over the whole vocabulary) is a candidate."""
    result = MetricResult("valid_ratio", 0, 0)
    if not cases:
        return result
    table, per_case = _candidate_scores(scorer, cases)
    vocab = list(scorer.vocab)
    for row, case, scores in zip(table, cases, per_case):
        top = pick(vocab, row)
        ok = top in case.candidates.items
        result.successes += ok
        result.evaluated += 1
        result.decisions.append(
            _decision("valid_ratio", case, scores, top, ok, vocab_top_score=float(row[vocab.index(top)]))
        )
    return result


@dataclass
class BucketRow:
    label: str
    low: int | None
    high: int | None
    count: int
    successes: int

    @property
    def rate(self) -> float | None:
        return self.successes / self.count if self.count else None


@dataclass
class BucketSummary:
    rows: list[BucketRow]

    @property
    def coefficient_of_variation(self) -> float | None:
        rates = [r.rate for r in self.rows if r.rate is not None]
        if len(rates) < 2:
            return None
        mean = float(np.mean(rates))
        return float(np.std(rates)) / mean if mean > 0 else None


def bucket_edges_labels(edges: Sequence[int]) -> list[tuple[str, int | None, int | None]]:
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be strictly increasing, got {list(edges)}")
    lows: list[int | None] = [None, *edges]
    highs: list[int | None] = [*edges, None]
    out = []
    for lo, hi in zip(lows, highs):
        if lo is None:
            label = f"<{hi}"
        elif hi is None:
            label = f">={lo}"
        else:
            label = f"{lo}-{hi - 1}"
        out.append((label, lo, hi))
    return out


def bucket_by_history_len(scorer: Scorer, cases: Sequence[EvalCase], edges: Sequence[int]) -> BucketSummary:
    """HR@1 within history-length buckets ``[edge_i, edge_{i+1})`` plus open-ended ends."""
    spec = bucket_edges_labels(edges)
    hr = hit_ratio_at1(scorer, cases)
    rows = [BucketRow(label, lo, hi, 0, 0) for label, lo, hi in spec]
    for d in hr.decisions:
        n = d["history_length"]
        for row in rows:
            if (row.low is None or n >= row.low) and (row.high is None or n < row.high):
                row.count += 1
                row.successes += d["success"]
                break
    return BucketSummary(rows)


@dataclass
class MetricReport:
    metrics: dict[str, MetricResult]
    buckets: BucketSummary | None = None
    config: dict = field(default_factory=dict)
    label: str = ""

    def rate(self, name: str) -> float | None:
        m = self.metrics.get(name)
        return None if m is None else m.rate

    def to_dict(self) -> dict:
        metrics = {}
        for name in METRIC_NAMES:
            m = self.metrics.get(name)
            if m is not None and m.rate is not None:
                metrics[name] = {"rate": m.rate, "successes": m.successes, "evaluated": m.evaluated}
        doc: dict = {"schema_version": REPORT_SCHEMA_VERSION, "label": self.label, "metrics": metrics}
        if self.buckets is not None:
            doc["history_buckets"] = {
                "rows": [
                    {"label": r.label, "low": r.low, "high": r.high, "count": r.count, "successes": r.successes}
                    | ({"rate": r.rate} if r.rate is not None else {})
                    for r in self.buckets.rows
                ],
            }
            cv = self.buckets.coefficient_of_variation
            if cv is not None:
                doc["history_buckets"]["coefficient_of_variation"] = cv
        doc["notes"] = [AVERSION_NOTE]
        doc["config"] = self.config
        return doc

    def to_text(self) -> str:
        lines = [f"report {self.label}".rstrip(), ""]
        width = max(len(n) for n in METRIC_NAMES)
        lines.append(f"{'metric':<{width}}  {'rate':>8}  {'hits':>6}  {'cases':>6}")
        for name in METRIC_NAMES:
            m = self.metrics.get(name)
            if m is None or m.rate is None:
                lines.append(f"{name:<{width}}  {'-':>8}  {'-':>6}  {'-':>6}")
            else:
                lines.append(f"{name:<{width}}  {m.rate:>8.4f}  {m.successes:>6d}  {m.evaluated:>6d}")
        if self.buckets is not None:
            lines += ["", f"{'history length':<{width}}  {'HR@1':>8}  {'hits':>6}  {'cases':>6}"]
            for r in self.buckets.rows:
                rate = "-" if r.rate is None else f"{r.rate:.4f}"
                lines.append(f"{r.label:<{width}}  {rate:>8}  {r.successes:>6d}  {r.count:>6d}")
            cv = self.buckets.coefficient_of_variation
            lines.append(f"{'coefficient of variation':<{width}}  {'-' if cv is None else f'{cv:.4f}':>8}")
        lines += ["", f"note: {AVERSION_NOTE}", ""]
        return "\n".join(lines)

    def decisions(self) -> list[dict]:
        return [d for name in METRIC_NAMES if name in self.metrics for d in self.metrics[name].decisions]


def evaluate_all(
    scorer: Scorer,
    test: Sequence[EvalCase],
    adherence: Sequence[EvalCase] = (),
    avoidance: Sequence[EvalCase] = (),
    aversion: Sequence[EvalCase] = (),
    bucket_edges: Sequence[int] | None = None,
    config: RunConfig | None = None,
    label: str = "",
) -> MetricReport:
    metrics = {
        "hit_ratio_at1": hit_ratio_at1(scorer, test),
        "valid_ratio": valid_ratio(scorer, test),
        "adherence_rate": adherence_rate(scorer, adherence),
        "avoidance_rate": avoidance_rate(scorer, avoidance),
        "aversion_accuracy": aversion_accuracy(scorer, aversion),
    }
    buckets = bucket_by_history_len(scorer, test, bucket_edges) if bucket_edges else None
    return MetricReport(metrics, buckets, config_to_dict(config) if config else {}, label)


def emit_report(report: MetricReport, path: str | Path, fmt: str = "json") -> None:
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    elif fmt == "text":
        path.write_text(report.to_text(), encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def write_decision_log(report: MetricReport, path: str | Path) -> int:
    rows = report.decisions()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return len(rows)


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n)
