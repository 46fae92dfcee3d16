import pytest
from hypothesis import given
from hypothesis import strategies as st

from recpo_lab.domain import (
    CandidateSet,
    Interaction,
    PreferenceGroup,
    Provenance,
    ScoredItem,
    UserSequence,
    latency,
    median_inter_event_gap,
    validate_dataset,
)

from conftest import seq


def test_well_formed_dataset_is_clean():
    data = [seq(1, [(1, 4.0), (2, 3.0), (3, 5.0)]), seq(2, [(4, 1.0), (1, 2.0), (5, 5.0)])]
    assert validate_dataset(data) == []
    assert validate_dataset(data) == []  # idempotent


def test_ordering_violation_names_user_and_positions():
    bad = UserSequence(7, (Interaction(1, 4.0, 5, 0), Interaction(2, 4.0, 3, 1), Interaction(3, 4.0, 9, 2)))
    (v,) = validate_dataset([bad])
    assert v.kind == "ordering" and v.user_id == 7 and v.positions == (0, 1)
    assert "user 7" in str(v)


def test_score_range_violation():
    bad = UserSequence(3, (Interaction(1, 4.0, 1, 0), Interaction(2, 7.0, 2, 1), Interaction(3, 4.0, 3, 2)))
    (v,) = validate_dataset([bad])
    assert v.kind == "score-range" and v.positions == (1,)


def test_length_positions_and_duplicate_users():
    short = seq(1, [(1, 4.0), (2, 4.0)])
    gap = UserSequence(2, (Interaction(1, 4.0, 1, 0), Interaction(2, 4.0, 2, 2), Interaction(3, 4.0, 3, 3)))
    kinds = sorted(v.kind for v in validate_dataset([short, gap, seq(2, [(1, 4.0)] * 3)]))
    assert kinds == ["duplicate-user", "length", "positions"]


def test_from_triples_sorts_stably():
    s = UserSequence.from_triples(1, [(10, 4, 30), (11, 5, 10), (12, 3, 10)])
    assert s.item_ids == (11, 12, 10)
    assert [x.position for x in s.interactions] == [0, 1, 2]
    assert s.prefix(1) == s.interactions[:2]
    assert s.future(0) == s.interactions[1:]
    with pytest.raises(ValueError):
        s.prefix(3)


@pytest.mark.parametrize("t,k,expected", [(4, 5, 1.0), (4, 9, 5.0)])
def test_latency_examples(t, k, expected):
    s = seq(0, [(i, 4.0) for i in range(10)])
    assert latency(s, t, k) == expected


def test_latency_rejects_non_future():
    s = seq(0, [(i, 4.0) for i in range(10)])
    with pytest.raises(ValueError):
        latency(s, 4, 4)


@given(st.integers(0, 8), st.integers(1, 9))
def test_latency_monotone_and_at_least_one(t, d):
    s = seq(0, [(i, 4.0) for i in range(20)], step=7)
    k = t + d
    assert latency(s, t, k) >= 1
    assert latency(s, t, k + 1) > latency(s, t, k)
    assert latency(s, t, k, "time", 7.0) == pytest.approx(d)


def test_median_gap():
    assert median_inter_event_gap([seq(0, [(1, 4.0), (2, 4.0), (3, 4.0)], step=10)]) == 10.0
    assert median_inter_event_gap([]) == 1.0


def test_candidate_set_round_trip():
    cs = CandidateSet(1, 3, (5, 6, 7), (Provenance.sampled(), Provenance.future(4, 2), Provenance.sampled()), 1)
    assert cs.ground_truth == 6 and cs.avoid_item is None
    assert CandidateSet.from_dict(cs.to_dict()) == cs


def _cs():
    return CandidateSet(1, 0, (1, 2), (Provenance.future(5, 1), Provenance.sampled()), 0)


def test_preference_group_validation():
    ok = PreferenceGroup(1, 0, _cs(), ScoredItem(1, 5, 1), (ScoredItem(2, 3, 5),))
    assert ok.items == (1, 2)
    with pytest.raises(ValueError):
        PreferenceGroup(1, 0, _cs(), ScoredItem(1, 5, 1), ())
    with pytest.raises(ValueError):
        PreferenceGroup(1, 0, _cs(), ScoredItem(1, 5, 0.5), (ScoredItem(2, 3, 5),))
    with pytest.raises(ValueError):
        PreferenceGroup(1, 0, _cs(), ScoredItem(1, 6, 1), (ScoredItem(2, 3, 5),))
    with pytest.raises(ValueError):
        PreferenceGroup(1, 0, _cs(), ScoredItem(1, 5, 1), (ScoredItem(1, 3, 5),))
