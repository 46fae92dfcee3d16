"""Raw interaction logs to validated user sequences.

Covers MovieLens-1M ``.dat`` parsing, generic CSV ingestion, k-core filtering,
percentile conversion of implicit engagement to 1-5 scores, and a seeded
synthetic generator whose users drift over time.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .domain import UserSequence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawEvent:
    user_id: int
    item_id: int
    value: float
    timestamp: int

    def __post_init__(self) -> None:
        if self.value < 0:
            raise ValueError(f"event value must be >= 0, got {self.value}")
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be >= 0, got {self.timestamp}")


@dataclass
class ParseResult:
    events: list[RawEvent]
    titles: dict[int, str]
    skipped: int = 0


def parse_movielens(ratings_path: str | Path, movies_path: str | Path | None = None) -> ParseResult:
    """Parse ``UserID::MovieID::Rating::Timestamp`` lines (and optional ``MovieID::Title::Genres``)."""
    events: list[RawEvent] = []
    skipped = 0
    with open(ratings_path, encoding="latin-1") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            try:
                if len(parts) != 4:
                    raise ValueError(line)
                events.append(RawEvent(int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])))
            except ValueError:
                skipped += 1
    titles: dict[int, str] = {}
    if movies_path is not None:
        with open(movies_path, encoding="latin-1") as fh:
            for line in fh:
                parts = line.rstrip("\r\n").split("::")
                if len(parts) < 2:
                    continue
                try:
                    titles[int(parts[0])] = parts[1]
                except ValueError:
                    continue
    if skipped:
        logger.warning("skipped %d malformed line(s) in %s", skipped, ratings_path)
    return ParseResult(events, titles, skipped)


def parse_csv(path: str | Path) -> ParseResult:
    """Parse a CSV with header ``user_id,item_id,value,timestamp`` (extra columns ignored)."""
    events: list[RawEvent] = []
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"user_id", "item_id", "value", "timestamp"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for row in reader:
            try:
                events.append(
                    RawEvent(
                        int(row["user_id"]),
                        int(row["item_id"]),
                        float(row["value"]),
                        int(float(row["timestamp"])),
                    )
                )
            except (TypeError, ValueError):
                skipped += 1
    return ParseResult(events, {}, skipped)


def kcore_filter(events: Sequence[RawEvent], k: int = 5) -> list[RawEvent]:
    """Largest subset in which every user and every item has at least ``k`` events.

    Each round drops all events of under-``k`` users and items at once until
    nothing changes; the surviving order follows the input order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    current = list(events)
    while True:
        users = Counter(e.user_id for e in current)
        items = Counter(e.item_id for e in current)
        kept = [e for e in current if users[e.user_id] >= k and items[e.item_id] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


def percentile_scores(values: Sequence[float]) -> list[int]:
    """Quintile bucket of each value within its pool (average rank for ties).

    Percentile rank is ``rank / n``; top 20% -> 5, (60, 80]% -> 4, ..., bottom 20% -> 1.
    """
    n = len(values)
    if n == 0:
        return []
    twice_rank = np.rint(2 * rankdata(values, method="average")).astype(int)
    # ceil(5 * rank / n) in exact integer arithmetic; average ranks are multiples of 1/2
    scores = -((-5 * twice_rank) // (2 * n))
    return [int(min(5, max(1, s))) for s in scores]


def implicit_to_score(events: Sequence[RawEvent], pool: str = "item") -> list[RawEvent]:
    """Replace raw engagement values with 1-5 scores ranked within each item's (or user's) pool."""
    if pool not in ("item", "user"):
        raise ValueError(f"pool must be 'item' or 'user', got {pool!r}")
    groups: dict[int, list[int]] = defaultdict(list)
    for i, e in enumerate(events):
        groups[e.item_id if pool == "item" else e.user_id].append(i)
    out: list[RawEvent | None] = [None] * len(events)
    for idx in groups.values():
        for i, s in zip(idx, percentile_scores([events[i].value for i in idx])):
            e = events[i]
            out[i] = RawEvent(e.user_id, e.item_id, float(s), e.timestamp)
    return out  # type: ignore[return-value]


def to_sequences(events: Iterable[RawEvent], min_length: int = 3) -> list[UserSequence]:
    """Group scored events per user in timestamp order; drops users shorter than ``min_length``."""
    per_user: dict[int, list[tuple[int, float, int]]] = defaultdict(list)
    for e in events:
        if not 1.0 <= e.value <= 5.0:
            raise ValueError(f"score {e.value} outside [1, 5] for user {e.user_id}; convert implicit values first")
        per_user[e.user_id].append((e.item_id, e.value, e.timestamp))
    seqs = [UserSequence.from_triples(u, rows) for u, rows in sorted(per_user.items())]
    return [s for s in seqs if len(s) >= min_length]


def ingest_events(
    events: Sequence[RawEvent], k: int = 5, implicit: bool = False, pool: str = "item"
) -> list[UserSequence]:
    filtered = kcore_filter(events, k)
    if implicit:
        filtered = implicit_to_score(filtered, pool)
    return to_sequences(filtered)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 200
    num_items: int = 300
    min_length: int = 20
    max_length: int = 40
    latent_dim: int = 8
    drift: float = 0.9
    noise: float = 0.15
    thresholds: tuple[float, ...] = (-0.1, 0.15, 0.35, 0.55)
    temperature: float = 6.0
    popularity: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drift <= 1.0:
            raise ValueError("drift must lie in [0, 1]")
        if len(self.thresholds) != 4 or any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be 4 strictly increasing cut points")
        if not 3 <= self.min_length <= self.max_length:
            raise ValueError("need 3 <= min_length <= max_length")
        if self.max_length > self.num_items:
            raise ValueError("max_length cannot exceed num_items (items are not repeated)")
        if self.num_users < 1 or self.latent_dim < 1 or self.noise < 0 or self.temperature <= 0 or self.popularity < 0:
            raise ValueError("invalid synthetic spec")

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticSpec":
        data = json.loads(Path(path).read_text())
        if "thresholds" in data:
            data["thresholds"] = tuple(data["thresholds"])
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d


@dataclass
class SyntheticDataset:
    sequences: list[UserSequence]
    titles: dict[int, str]
    item_latents: np.ndarray
    item_exposure: np.ndarray
    user_latents: list[np.ndarray] = field(default_factory=list)  # per user: N_u x dim


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Users whose latent taste drifts; each step picks an unseen item by softmax affinity.

    Selection logits add an item-level exposure offset (scaled by
    ``popularity``) to the taste affinity, so popular items get consumed and
    then disliked. The score is the taste affinity plus Gaussian noise,
    bucketed by the four thresholds into 1-5.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.latent_dim
    items = rng.standard_normal((spec.num_items, d))
    items /= np.linalg.norm(items, axis=1, keepdims=True)
    exposure = spec.popularity * rng.standard_normal(spec.num_items)
    thresholds = np.asarray(spec.thresholds)
    sequences: list[UserSequence] = []
    latents: list[np.ndarray] = []
    for u in range(spec.num_users):
        n = int(rng.integers(spec.min_length, spec.max_length + 1))
        state = _unit(rng.standard_normal(d))
        available = np.ones(spec.num_items, dtype=bool)
        ts = int(rng.integers(0, 86_400))
        rows = []
        path = np.empty((n, d))
        for k in range(n):
            if k > 0:
                state = _unit(spec.drift * state + (1.0 - spec.drift) * _unit(rng.standard_normal(d)))
            path[k] = state
            affinity = items @ state
            logits = np.where(available, spec.temperature * affinity + exposure, -np.inf)
            p = np.exp(logits - logits.max())
            p /= p.sum()
            item = int(rng.choice(spec.num_items, p=p))
            available[item] = False
            noisy = affinity[item] + spec.noise * rng.standard_normal()
            score = 1 + int(np.sum(noisy > thresholds))
            ts += int(rng.integers(3_600, 3 * 86_400))
            rows.append((item, float(score), ts))
        sequences.append(UserSequence.from_triples(u, rows))
        latents.append(path)
    titles = {i: f"Item {i:04d}" for i in range(spec.num_items)}
    return SyntheticDataset(sequences, titles, items, exposure, latents)


# ---------------------------------------------------------------- dataset files


def save_dataset(path: str | Path, sequences: Sequence[UserSequence], titles: dict[int, str]) -> None:
    doc = {
        "titles": {str(k): titles[k] for k in sorted(titles)},
        "sequences": [
            {
                "user_id": s.user_id,
                "interactions": [[x.item_id, x.score, x.timestamp] for x in s.interactions],
            }
            for s in sequences
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> tuple[list[UserSequence], dict[int, str]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    titles = {int(k): v for k, v in doc.get("titles", {}).items()}
    seqs = [
        UserSequence.from_triples(s["user_id"], [tuple(x) for x in s["interactions"]])
        for s in doc["sequences"]
    ]
    return seqs, titles
