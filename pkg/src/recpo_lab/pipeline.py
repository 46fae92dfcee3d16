"""Splits, candidate sets and preference groups.

A cut ``t`` means the history is every interaction at positions ``<= t`` and
the decision concerns what comes after it. Every random draw comes from a
generator derived from ``(seed, user_id, t, stream)``, so building cuts in any
order or in parallel gives the same result.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import DataConfig, MarginSpec
from .domain import (
    HIGH_SCORE,
    LOW_SCORE,
    CandidateSet,
    PreferenceGroup,
    Provenance,
    ProvenanceKind,
    ScoredItem,
    UserSequence,
    latency,
    median_inter_event_gap,
)


class Stream(IntEnum):
    TRAIN_CANDIDATES = 1
    GROUP = 2
    EVAL = 3
    ADHERENCE = 4
    AVOIDANCE = 5
    AVERSION = 6
    SUBSAMPLE = 7


def cut_rng(seed: int, user_id: int, cut: int, stream: Stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, user_id, cut + 1, int(stream)]))


class DatasetTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class LatencyRule:
    unit: str = "rank"
    median_gap: float | None = None

    def __call__(self, seq: UserSequence, cut: int, position: int) -> float:
        return latency(seq, cut, position, self.unit, self.median_gap)


@dataclass(frozen=True)
class EvalCase:
    sequence: UserSequence
    candidates: CandidateSet

    @property
    def cut(self) -> int:
        return self.candidates.cut

    @property
    def history_length(self) -> int:
        return self.cut + 1


@dataclass(frozen=True)
class TrainExample:
    sequence: UserSequence  # truncated to the training region
    group: PreferenceGroup

    @property
    def cut(self) -> int:
        return self.group.cut

    @property
    def candidates(self) -> CandidateSet:
        return self.group.candidates


@dataclass
class SplitDataset:
    vocab: tuple[int, ...]
    train: list[TrainExample] = field(default_factory=list)
    valid: list[EvalCase] = field(default_factory=list)
    test: list[EvalCase] = field(default_factory=list)
    adherence: list[EvalCase] = field(default_factory=list)
    avoidance: list[EvalCase] = field(default_factory=list)
    aversion: list[EvalCase] = field(default_factory=list)
    skipped_cuts: int = 0


@dataclass(frozen=True)
class SplitPlan:
    """Cut points for one user under leave-last-two splitting."""

    sequence: UserSequence
    train_end: int  # positions < train_end form the training region
    valid_cut: int | None
    test_cut: int | None

    @property
    def train_cuts(self) -> list[int]:
        return list(range(0, self.train_end - 1))


def leave_last_two_split(sequences: Iterable[UserSequence]) -> list[SplitPlan]:
    """Last interaction for test, second-to-last for validation, the rest for training.

    Validation/test targets must be highly scored; otherwise that split omits the user.
    """
    plans = []
    for seq in sequences:
        n = len(seq)
        if n < 3:
            raise ValueError(f"user {seq.user_id} has {n} interactions; leave-last-two needs >= 3")
        valid_ok = seq.interactions[n - 2].score >= HIGH_SCORE
        test_ok = seq.interactions[n - 1].score >= HIGH_SCORE
        plans.append(SplitPlan(seq, n - 2, n - 3 if valid_ok else None, n - 2 if test_ok else None))
    return plans


def _unseen_pool(vocab: Sequence[int], sequence: UserSequence, exclude: Iterable[int] = ()) -> np.ndarray:
    seen = set(sequence.item_ids) | set(exclude)
    return np.array([v for v in vocab if v not in seen], dtype=np.int64)


def _sample_unseen(
    rng: np.random.Generator, vocab: Sequence[int], sequence: UserSequence, n: int, exclude: Iterable[int] = ()
) -> list[int]:
    if n <= 0:
        return []
    pool = _unseen_pool(vocab, sequence, exclude)
    if pool.size < n:
        raise DatasetTooSmall(
            f"user {sequence.user_id}: need {n} never-interacted items, only {pool.size} available"
        )
    return [int(x) for x in rng.choice(pool, size=n, replace=False)]


def _assemble(
    rng: np.random.Generator,
    sequence: UserSequence,
    cut: int,
    fixed: list[tuple[int, Provenance]],
    k: int,
    vocab: Sequence[int],
    gt_item: int | None,
    avoid_item: int | None = None,
) -> CandidateSet:
    samples = _sample_unseen(rng, vocab, sequence, k - len(fixed), exclude=[i for i, _ in fixed])
    entries = fixed + [(i, Provenance.sampled()) for i in samples]
    order = rng.permutation(len(entries))
    entries = [entries[i] for i in order]
    items = tuple(i for i, _ in entries)
    return CandidateSet(
        user_id=sequence.user_id,
        cut=cut,
        items=items,
        provenance=tuple(p for _, p in entries),
        ground_truth_index=None if gt_item is None else items.index(gt_item),
        avoid_index=None if avoid_item is None else items.index(avoid_item),
    )


def _future_window(sequence: UserSequence, cut: int, end: int | None) -> list:
    history = set(sequence.item_ids[: cut + 1])
    out, seen = [], set()
    for x in sequence.future(cut, end):
        if x.item_id in history or x.item_id in seen:
            continue
        seen.add(x.item_id)
        out.append(x)
    return out


def build_train_candidates(
    sequence: UserSequence,
    cut: int,
    rng: np.random.Generator,
    vocab: Sequence[int],
    cfg: DataConfig = DataConfig(),
    end: int | None = None,
    latency_rule: LatencyRule = LatencyRule(),
) -> CandidateSet | None:
    """Ground truth plus the next future interactions, then never-interacted samples.

    Only positions in ``(cut, end)`` count as future. Returns ``None`` when no
    future interaction is highly scored.
    """
    future = _future_window(sequence, cut, end)
    gt = next((x for x in future if x.score >= HIGH_SCORE), None)
    if gt is None:
        return None
    chosen = [gt] + [x for x in future if x is not gt][: cfg.num_future - 1]
    chosen.sort(key=lambda x: x.position)
    fixed = [(x.item_id, Provenance.future(x.score, latency_rule(sequence, cut, x.position))) for x in chosen]
    # Short futures are padded by the sampled half, keeping K fixed.
    return _assemble(rng, sequence, cut, fixed, cfg.candidate_size, vocab, gt.item_id)


def build_eval_candidates(
    sequence: UserSequence,
    cut: int,
    rng: np.random.Generator,
    vocab: Sequence[int],
    cfg: DataConfig = DataConfig(),
    latency_rule: LatencyRule = LatencyRule(),
) -> CandidateSet:
    """The interaction right after ``cut`` plus K-1 never-interacted samples."""
    if cut + 1 >= len(sequence):
        raise ValueError(f"cut {cut} has no next interaction")
    target = sequence.interactions[cut + 1]
    if target.score < HIGH_SCORE:
        raise ValueError(f"target score {target.score} < {HIGH_SCORE}")
    fixed = [(target.item_id, Provenance.future(target.score, latency_rule(sequence, cut, cut + 1)))]
    return _assemble(rng, sequence, cut, fixed, cfg.candidate_size, vocab, target.item_id)


def assemble_preference_group(
    candidates: CandidateSet,
    cut: int,
    cfg: DataConfig,
    margin: MarginSpec,
    rng: np.random.Generator,
) -> PreferenceGroup:
    """Preferred = ground truth; negatives sampled from the other candidates.

    Observed future negatives keep their (score, latency); sampled ones get the
    margin spec's defaults.
    """
    if candidates.ground_truth_index is None:
        raise ValueError("candidate set has no ground truth")
    others = [i for i in range(len(candidates)) if i != candidates.ground_truth_index]
    n = cfg.negatives_per_group
    if n > len(others):
        raise ValueError(f"negatives_per_group={n} exceeds the {len(others)} available candidates")
    picks = rng.choice(len(others), size=n, replace=False)

    def scored(i: int) -> ScoredItem:
        p = candidates.provenance[i]
        if p.kind is ProvenanceKind.FUTURE:
            return ScoredItem(candidates.items[i], p.score, p.latency)
        return ScoredItem(candidates.items[i], margin.default_score, margin.default_latency)

    return PreferenceGroup(
        user_id=candidates.user_id,
        cut=cut,
        candidates=candidates,
        preferred=scored(candidates.ground_truth_index),
        dispreferred=tuple(scored(others[int(j)]) for j in picks),
    )


def adherence_cut(sequence: UserSequence) -> int | None:
    """Latest cut followed by at least two highly scored interactions."""
    highs = [x.position for x in sequence.interactions if x.score >= HIGH_SCORE]
    return highs[-2] - 1 if len(highs) >= 2 and highs[-2] >= 1 else None


def build_adherence_set(
    sequence: UserSequence,
    cut: int,
    rng: np.random.Generator,
    vocab: Sequence[int],
    cfg: DataConfig = DataConfig(),
    latency_rule: LatencyRule = LatencyRule(),
) -> CandidateSet | None:
    """Smallest-latency future high item as ground truth, later high items as distractors."""
    highs = [x for x in _future_window(sequence, cut, None) if x.score >= HIGH_SCORE]
    if len(highs) < 2:
        return None
    chosen = highs[: 1 + cfg.adherence_cap]
    fixed = [(x.item_id, Provenance.future(x.score, latency_rule(sequence, cut, x.position))) for x in chosen]
    return _assemble(rng, sequence, cut, fixed, cfg.candidate_size, vocab, chosen[0].item_id)


def build_avoidance_set(
    sequence: UserSequence,
    rng: np.random.Generator,
    vocab: Sequence[int],
    cfg: DataConfig = DataConfig(),
) -> CandidateSet | None:
    """Low-scored last interaction among never-interacted samples; there is no correct item."""
    last = sequence.interactions[-1]
    if last.score > LOW_SCORE or len(sequence) < 2:
        return None
    cut = len(sequence) - 2
    fixed = [(last.item_id, Provenance.future(last.score, 1.0))]
    return _assemble(rng, sequence, cut, fixed, cfg.candidate_size, vocab, None, avoid_item=last.item_id)


def aversion_cut(sequence: UserSequence) -> int | None:
    """Latest cut followed by both a highly scored and a low-scored interaction."""
    for cut in range(len(sequence) - 3, -1, -1):
        fut = sequence.future(cut)
        if any(x.score >= HIGH_SCORE for x in fut) and any(x.score <= LOW_SCORE for x in fut):
            return cut
    return None


def build_aversion_set(
    sequence: UserSequence,
    cut: int,
    rng: np.random.Generator,
    vocab: Sequence[int],
    cfg: DataConfig = DataConfig(),
    latency_rule: LatencyRule = LatencyRule(),
) -> CandidateSet | None:
    """Next high item as ground truth plus the first future low item as the aversion target."""
    future = _future_window(sequence, cut, None)
    high = next((x for x in future if x.score >= HIGH_SCORE), None)
    low = next((x for x in future if x.score <= LOW_SCORE), None)
    if high is None or low is None:
        return None
    fixed = [
        (x.item_id, Provenance.future(x.score, latency_rule(sequence, cut, x.position)))
        for x in sorted((high, low), key=lambda x: x.position)
    ]
    return _assemble(rng, sequence, cut, fixed, cfg.candidate_size, vocab, high.item_id, avoid_item=low.item_id)


def vocabulary(sequences: Iterable[UserSequence]) -> tuple[int, ...]:
    return tuple(sorted({x.item_id for s in sequences for x in s.interactions}))


def build_splits(
    sequences: Sequence[UserSequence],
    cfg: DataConfig,
    margin: MarginSpec,
    seed: int,
    vocab: Sequence[int] | None = None,
) -> SplitDataset:
    """Everything the training and evaluation stages consume, built deterministically from ``seed``."""
    vocab = tuple(vocab) if vocab is not None else vocabulary(sequences)
    rule = LatencyRule(
        cfg.latency_unit, median_inter_event_gap(sequences) if cfg.latency_unit == "time" else None
    )
    out = SplitDataset(vocab=vocab)
    for plan in leave_last_two_split(sequences):
        seq = plan.sequence
        uid = seq.user_id
        region = seq.truncated(plan.train_end)
        cuts = [t for t in plan.train_cuts if any(x.score >= HIGH_SCORE for x in region.future(t))]
        out.skipped_cuts += len(plan.train_cuts) - len(cuts)
        if len(cuts) > cfg.per_user_cap:
            pick = cut_rng(seed, uid, -1, Stream.SUBSAMPLE).choice(len(cuts), cfg.per_user_cap, replace=False)
            cuts = sorted(cuts[int(i)] for i in pick)
        for t in cuts:
            # Candidates come from the full sequence's vocabulary exclusions so that
            # validation/test items are never sampled as training negatives.
            cs = build_train_candidates(
                seq, t, cut_rng(seed, uid, t, Stream.TRAIN_CANDIDATES), vocab, cfg, plan.train_end, rule
            )
            if cs is None:
                out.skipped_cuts += 1
                continue
            group = assemble_preference_group(cs, t, cfg, margin, cut_rng(seed, uid, t, Stream.GROUP))
            out.train.append(TrainExample(region, group))
        for cut, bucket in ((plan.valid_cut, out.valid), (plan.test_cut, out.test)):
            if cut is not None:
                cs = build_eval_candidates(seq, cut, cut_rng(seed, uid, cut, Stream.EVAL), vocab, cfg, rule)
                bucket.append(EvalCase(seq, cs))
        t = adherence_cut(seq)
        if t is not None:
            cs = build_adherence_set(seq, t, cut_rng(seed, uid, t, Stream.ADHERENCE), vocab, cfg, rule)
            if cs is not None:
                out.adherence.append(EvalCase(seq, cs))
        cs = build_avoidance_set(seq, cut_rng(seed, uid, len(seq) - 2, Stream.AVOIDANCE), vocab, cfg)
        if cs is not None:
            out.avoidance.append(EvalCase(seq, cs))
        t = aversion_cut(seq)
        if t is not None:
            cs = build_aversion_set(seq, t, cut_rng(seed, uid, t, Stream.AVERSION), vocab, cfg, rule)
            if cs is not None:
                out.aversion.append(EvalCase(seq, cs))
    return out


def candidate_set_problems(cs: CandidateSet, sequence: UserSequence, k: int = 20) -> list[str]:
    """Re-check the candidate set invariants; empty list when all hold."""
    problems = []
    if len(cs.items) != k:
        problems.append(f"K={len(cs.items)} != {k}")
    if len(set(cs.items)) != len(cs.items):
        problems.append("duplicate candidates")
    if len(cs.provenance) != len(cs.items):
        problems.append("provenance length mismatch")
    overlap = set(cs.items) & set(sequence.item_ids[: cs.cut + 1])
    if overlap:
        problems.append(f"candidates overlap history: {sorted(overlap)}")
    if cs.ground_truth_index is not None:
        if not 0 <= cs.ground_truth_index < len(cs.items):
            problems.append("ground_truth_index out of range")
        elif cs.provenance[cs.ground_truth_index].kind is not ProvenanceKind.FUTURE:
            problems.append("ground truth is not a future interaction")
    for item, p in zip(cs.items, cs.provenance):
        if p.kind is ProvenanceKind.SAMPLED and item in sequence.item_ids:
            problems.append(f"sampled item {item} was interacted with")
    return problems


def export_manifest(cases: Iterable[EvalCase | TrainExample], path: str | Path) -> int:
    """One JSON line per cut: user, cut, candidates, provenance, indices."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for case in cases:
            fh.write(json.dumps(case.candidates.to_dict()) + "\n")
            n += 1
    return n


def read_manifest(path: str | Path) -> list[CandidateSet]:
    with open(path, encoding="utf-8") as fh:
        return [CandidateSet.from_dict(json.loads(line)) for line in fh if line.strip()]
