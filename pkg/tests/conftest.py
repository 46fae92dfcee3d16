from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from recpo_lab.config import RunConfig
from recpo_lab.domain import UserSequence
from recpo_lab.ingest import SyntheticSpec, generate_synthetic, ingest_events, parse_movielens
from recpo_lab.policy import PolicyParams, encode_contexts
from recpo_lab.train import PreparedGroups

FIXTURES = Path(__file__).parent / "fixtures"
ML_TINY = FIXTURES / "ml_tiny"


def seq(user_id: int, rows: list[tuple[int, float]], t0: int = 1000, step: int = 10) -> UserSequence:
    """Sequence with evenly spaced timestamps from ``(item, score)`` pairs."""
    return UserSequence.from_triples(user_id, [(i, s, t0 + k * step) for k, (i, s) in enumerate(rows)])


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic(SyntheticSpec(num_users=40, num_items=80, min_length=12, max_length=20, seed=3))


@pytest.fixture(scope="session")
def small_cfg() -> RunConfig:
    return RunConfig(seed=5).with_overrides(
        ["policy.dim=8", "optim.epochs_sft=3", "optim.epochs_align=2", "optim.batch_size=32", "data.per_user_cap=6"]
    )


@pytest.fixture(scope="session")
def ml_tiny():
    parsed = parse_movielens(ML_TINY / "ratings.dat", ML_TINY / "movies.dat")
    return parsed, ingest_events(parsed.events, k=1)


GOLDEN = FIXTURES / "golden"
PROMPT_CONFIGS = [(mode, scores) for mode in ("full", "filtered") for scores in (True, False)]


def golden_name(mode: str, scores: bool) -> str:
    return f"prompts_{mode}_{'scores' if scores else 'noscores'}.jsonl"


def export_fixture_prompts(mode: str, scores: bool, path: Path) -> int:
    """Export the ml_tiny training groups under one history/score configuration."""
    from recpo_lab.experiments import make_split
    from recpo_lab.prompts import build_record, export_jsonl

    parsed = parse_movielens(ML_TINY / "ratings.dat", ML_TINY / "movies.dat")
    seqs = ingest_events(parsed.events, k=1)
    cfg = RunConfig(seed=0).evolve(**{"data.history_mode": mode, "data.include_scores": scores, "data.kcore": 1})
    split = make_split(seqs, cfg)
    return export_jsonl((build_record(e, parsed.titles, cfg) for e in split.train), path)


def tiny_params(rng, v=6, d=3):
    return PolicyParams(tuple(range(v)), rng.normal(size=(v, d)), rng.normal(size=v) * 0.3, 0.7, 0.4)


def covering_instance(rng, j, n=4):
    """Alignment groups whose loss gradient has no coordinate that is zero or nearly so.

    The relative-error check divides by the numeric gradient, so the instance must
    avoid structural zeros: every item is a group member (history-only items have
    an exactly zero bias gradient), every item keeps one role across groups (a
    preferred-here, rejected-there item can cancel to ~1e-9), and each history has
    distinct scores (equal scores make the score-gain gradient vanish).
    """
    v = 1 + j
    params = tiny_params(rng, v=v)
    ctx = []
    for u in range(n):
        h = rng.choice(v, size=min(v, 3), replace=False)
        scores = rng.choice(np.arange(1.0, 6.0), size=len(h), replace=False)
        ctx.append((seq(u, [(int(i), float(s)) for i, s in zip(h, scores)]), len(h) - 1))
    data = PreparedGroups(
        batch=encode_contexts(ctx, params.index()),
        pref=np.zeros(n, dtype=np.int64),
        neg=np.tile(np.arange(1, v), (n, 1)),
        # preferred utility s/sqrt(dt) >= 4/sqrt(2) always beats a negative's <= 3/sqrt(2),
        # so the log-difference margin never hits its floor
        pref_sl=np.column_stack([rng.integers(4, 6, n), rng.integers(1, 3, n)]).astype(float),
        neg_sl=np.stack([rng.integers(1, 4, (n, j)), rng.integers(2, 9, (n, j))], axis=-1).astype(float),
    )
    return params, data


# ---------------------------------------------------------------- acceptance verdict lines

ACCEPTANCE: list[tuple[int, str]] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion; returns the flag."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
