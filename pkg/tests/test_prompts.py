import pytest

from recpo_lab.config import HistoryMode, RunConfig
from recpo_lab.domain import CandidateSet, Provenance
from recpo_lab.prompts import (
    TEMPLATES,
    MissingTitle,
    PromptRecord,
    export_jsonl,
    history_line,
    read_jsonl,
    render_prompt,
    template_for,
)

from conftest import GOLDEN, PROMPT_CONFIGS, export_fixture_prompts, golden_name, seq

TITLES = {1: "Toy Story", 2: "Heat", 3: "Fargo", 4: "Alien", 5: "Babe"}


def _cands(items=(4, 5)):
    return CandidateSet(0, 2, items, (Provenance.future(5, 1),) + (Provenance.sampled(),) * (len(items) - 1), 0)


def test_history_line_format():
    s = seq(0, [(1, 4.0)])
    assert history_line(s.interactions[0], TITLES, True) == "Toy Story | Rating: 4"
    assert history_line(s.interactions[0], TITLES, False) == "Toy Story"


@pytest.mark.parametrize("score,shown", [(3.5, 4), (2.5, 3), (4.49, 4), (1.0, 1)])
def test_rating_rounds_half_up(score, shown):
    (x,) = seq(0, [(2, score)]).interactions
    assert history_line(x, TITLES, True) == f"Heat | Rating: {shown}"


def test_render_matches_hand_built_string():
    s = seq(0, [(1, 4.0), (2, 2.0), (3, 5.0)])
    expected = (
        "Given the user's recent viewing and rating history:\n"
        "Toy Story | Rating: 4\nHeat | Rating: 2\nFargo | Rating: 5\n\n"
        "recommend a movie they will likely watch next and rate generously from following candidates:\n"
        "Alien\nBabe\n\n"
        "Answer with the title of exactly one candidate."
    )
    assert render_prompt(s.prefix(2), _cands(), TITLES) == expected


def test_filtered_no_scores_render():
    s = seq(0, [(1, 4.0), (2, 2.0), (3, 5.0)])
    text = render_prompt(s.prefix(2), _cands(), TITLES, HistoryMode.FILTERED, False, template=1)
    lines = text.split("\n")
    assert lines[0] == TEMPLATES[1].history_prefix
    assert lines[1:3] == ["Toy Story", "Fargo"]
    assert "Heat" not in text and "Rating" not in text


def test_missing_title():
    s = seq(0, [(9, 4.0)])
    with pytest.raises(MissingTitle):
        render_prompt(s.prefix(0), _cands(), TITLES)


def test_template_choice_is_deterministic_and_spread():
    picks = [template_for(0, u, t) for u in range(30) for t in range(10)]
    assert picks == [template_for(0, u, t) for u in range(30) for t in range(10)]
    assert set(picks) == set(range(len(TEMPLATES)))


def test_jsonl_round_trip(tmp_path):
    recs = [PromptRecord("p\nq", "Amélie", ("a", "b"), {"user_id": 1, "t": 0})]
    assert export_jsonl(recs, tmp_path / "x.jsonl") == 1
    assert read_jsonl(tmp_path / "x.jsonl") == recs
    assert "Amélie" in (tmp_path / "x.jsonl").read_text(encoding="utf-8")


@pytest.mark.parametrize("mode,scores", PROMPT_CONFIGS)
def test_golden_prompts(tmp_path, mode, scores):
    out = tmp_path / "p.jsonl"
    assert export_fixture_prompts(mode, scores, out) > 0
    assert out.read_bytes() == (GOLDEN / golden_name(mode, scores)).read_bytes()


def test_golden_contains_exact_rating_line():
    text = (GOLDEN / golden_name("full", True)).read_text(encoding="utf-8")
    assert "\\nToy Story | Rating: 4\\n" in text
    recs = read_jsonl(GOLDEN / golden_name("full", True))
    assert all(len(r.rejected) == RunConfig().data.negatives_per_group for r in recs)
