"""Shared domain types: interactions, sequences, candidate sets, preference groups."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

HIGH_SCORE = 4.0
LOW_SCORE = 2.0


@dataclass(frozen=True)
class Interaction:
    item_id: int
    score: float
    timestamp: int
    position: int


@dataclass(frozen=True)
class UserSequence:
    user_id: int
    interactions: tuple[Interaction, ...]

    @classmethod
    def from_triples(cls, user_id: int, triples: Iterable[tuple[int, float, int]]) -> "UserSequence":
        """Build a sequence from (item_id, score, timestamp), ordering by timestamp (stable)."""
        ordered = sorted(triples, key=lambda x: x[2])
        return cls(
            user_id=int(user_id),
            interactions=tuple(
                Interaction(int(item), float(score), int(ts), k)
                for k, (item, score, ts) in enumerate(ordered)
            ),
        )

    def __len__(self) -> int:
        return len(self.interactions)

    @property
    def item_ids(self) -> tuple[int, ...]:
        return tuple(x.item_id for x in self.interactions)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(x.score for x in self.interactions)

    def prefix(self, cut: int) -> tuple[Interaction, ...]:
        """History up to and including position ``cut``."""
        if not 0 <= cut < len(self.interactions):
            raise ValueError(f"cut {cut} outside sequence of length {len(self)}")
        return self.interactions[: cut + 1]

    def future(self, cut: int, end: int | None = None) -> tuple[Interaction, ...]:
        """Interactions strictly after ``cut`` and before ``end`` (exclusive)."""
        return self.interactions[cut + 1 : end]

    def truncated(self, length: int) -> "UserSequence":
        return UserSequence(self.user_id, self.interactions[:length])


class ProvenanceKind(str, Enum):
    FUTURE = "future"
    SAMPLED = "sampled"


@dataclass(frozen=True)
class Provenance:
    kind: ProvenanceKind
    score: float | None = None
    latency: float | None = None

    @classmethod
    def future(cls, score: float, latency: float) -> "Provenance":
        return cls(ProvenanceKind.FUTURE, float(score), float(latency))

    @classmethod
    def sampled(cls) -> "Provenance":
        return cls(ProvenanceKind.SAMPLED)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind.value}
        if self.kind is ProvenanceKind.FUTURE:
            out["score"] = self.score
            out["latency"] = self.latency
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        kind = ProvenanceKind(d["kind"])
        if kind is ProvenanceKind.FUTURE:
            return cls.future(d["score"], d["latency"])
        return cls.sampled()


@dataclass(frozen=True)
class CandidateSet:
    """K candidate items for one decision point of one user.

    ``ground_truth_index`` is absent for avoidance sets, which only record the
    item to avoid. Aversion sets carry both: the ground truth and, in
    ``avoid_index``, the low-scored aversion target.
    """

    user_id: int
    cut: int
    items: tuple[int, ...]
    provenance: tuple[Provenance, ...]
    ground_truth_index: int | None
    avoid_index: int | None = None

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ground_truth(self) -> int | None:
        return None if self.ground_truth_index is None else self.items[self.ground_truth_index]

    @property
    def avoid_item(self) -> int | None:
        return None if self.avoid_index is None else self.items[self.avoid_index]

    def count(self, kind: ProvenanceKind) -> int:
        return sum(p.kind is kind for p in self.provenance)

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "t": self.cut,
            "items": list(self.items),
            "provenance": [p.to_dict() for p in self.provenance],
            "ground_truth_index": self.ground_truth_index,
            "avoid_index": self.avoid_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateSet":
        return cls(
            user_id=d["user_id"],
            cut=d["t"],
            items=tuple(d["items"]),
            provenance=tuple(Provenance.from_dict(p) for p in d["provenance"]),
            ground_truth_index=d["ground_truth_index"],
            avoid_index=d.get("avoid_index"),
        )


@dataclass(frozen=True)
class ScoredItem:
    item_id: int
    score: float
    latency: float


@dataclass(frozen=True)
class PreferenceGroup:
    user_id: int
    cut: int
    candidates: CandidateSet
    preferred: ScoredItem
    dispreferred: tuple[ScoredItem, ...]

    def __post_init__(self) -> None:
        if not self.dispreferred:
            raise ValueError("a preference group needs at least one dispreferred item")
        for it in (self.preferred, *self.dispreferred):
            if it.latency < 1:
                raise ValueError(f"latency {it.latency} < 1 for item {it.item_id}")
            if not 1.0 <= it.score <= 5.0:
                raise ValueError(f"score {it.score} outside [1, 5] for item {it.item_id}")
        if any(d.item_id == self.preferred.item_id for d in self.dispreferred):
            raise ValueError("preferred item also listed as dispreferred")

    @property
    def items(self) -> tuple[int, ...]:
        return (self.preferred.item_id, *(d.item_id for d in self.dispreferred))


@dataclass(frozen=True)
class Violation:
    user_id: int
    kind: str
    detail: str
    positions: tuple[int, ...] = field(default=())

    def __str__(self) -> str:
        where = f" at positions {list(self.positions)}" if self.positions else ""
        return f"user {self.user_id}: {self.kind}{where}: {self.detail}"


def validate_dataset(sequences: Sequence[UserSequence], min_length: int = 3) -> list[Violation]:
    """Check every sequence invariant; returns an empty list iff all hold."""
    report: list[Violation] = []
    seen_users: set[int] = set()
    for seq in sequences:
        uid = seq.user_id
        if uid in seen_users:
            report.append(Violation(uid, "duplicate-user", "user id appears twice"))
        seen_users.add(uid)
        if len(seq) < min_length:
            report.append(Violation(uid, "length", f"N_u={len(seq)} < {min_length}"))
        positions = [x.position for x in seq.interactions]
        if positions != list(range(len(positions))):
            dup = tuple(sorted({p for p in positions if positions.count(p) > 1}))
            report.append(Violation(uid, "positions", f"positions {positions} are not 0..N-1", dup))
        for prev, cur in zip(seq.interactions, seq.interactions[1:]):
            if cur.timestamp < prev.timestamp:
                report.append(
                    Violation(
                        uid,
                        "ordering",
                        f"timestamp {cur.timestamp} precedes {prev.timestamp}",
                        (prev.position, cur.position),
                    )
                )
        for x in seq.interactions:
            if not (math.isfinite(x.score) and 1.0 <= x.score <= 5.0):
                report.append(Violation(uid, "score-range", f"score {x.score} outside [1, 5]", (x.position,)))
    return report


def latency(
    sequence: UserSequence,
    cut: int,
    item_position: int,
    unit: str = "rank",
    median_gap: float | None = None,
) -> float:
    """Distance between the decision point ``cut`` and a later interaction.

    ``unit="rank"`` gives ``k - t``. ``unit="time"`` gives the timestamp delta
    divided by ``median_gap``, floored at 1.
    """
    n = len(sequence)
    if not (0 <= cut < item_position < n):
        raise ValueError(f"need 0 <= t < k < N_u, got t={cut}, k={item_position}, N_u={n}")
    if unit == "rank":
        return float(item_position - cut)
    if unit == "time":
        if not median_gap or median_gap <= 0:
            raise ValueError("time latency needs a positive median_gap")
        delta = sequence.interactions[item_position].timestamp - sequence.interactions[cut].timestamp
        return max(1.0, delta / median_gap)
    raise ValueError(f"unknown latency unit {unit!r}")


def median_inter_event_gap(sequences: Iterable[UserSequence]) -> float:
    gaps = [
        b.timestamp - a.timestamp
        for seq in sequences
        for a, b in zip(seq.interactions, seq.interactions[1:])
    ]
    if not gaps:
        return 1.0
    med = statistics.median(gaps)
    return float(med) if med > 0 else 1.0
