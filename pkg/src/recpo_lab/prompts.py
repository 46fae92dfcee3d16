"""Text prompts and JSON Lines preference export for external LLM trainers."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .config import HistoryMode, MarginSpec, RunConfig
from .domain import CandidateSet, Interaction
from .objectives import margin
from .pipeline import TrainExample
from .policy import visible_history


@dataclass(frozen=True)
class PromptTemplate:
    history_prefix: str
    candidate_prefix: str
    instruction: str


# Template 0 is the canonical wording; the others are paraphrases so a trainer
# does not overfit one phrasing.
TEMPLATES: tuple[PromptTemplate, ...] = (
    PromptTemplate(
        "Given the user's recent viewing and rating history:",
        "recommend a movie they will likely watch next and rate generously from following candidates:",
        "Answer with the title of exactly one candidate.",
    ),
    PromptTemplate(
        "Here is what the user watched recently, with the ratings they gave:",
        "From the candidates below, pick the movie they are most likely to watch next and rate highly:",
        "Reply with one candidate title only.",
    ),
    PromptTemplate(
        "The user's viewing history, most recent last:",
        "Choose, from the following candidates, the movie the user will probably watch next and enjoy:",
        "Output the chosen title exactly as listed.",
    ),
)


class MissingTitle(KeyError):
    pass


def _title(titles: dict[int, str], item: int) -> str:
    try:
        return titles[item]
    except KeyError:
        raise MissingTitle(f"no title for item {item}") from None


def _rating(score: float) -> int:
    # round half up so 3.5 -> 4 irrespective of banker's rounding
    return int(math.floor(score + 0.5))


def history_line(x: Interaction, titles: dict[int, str], include_scores: bool) -> str:
    title = _title(titles, x.item_id)
    return f"{title} | Rating: {_rating(x.score)}" if include_scores else title


def render_prompt(
    prefix: Sequence[Interaction],
    candidates: CandidateSet,
    titles: dict[int, str],
    history_mode: HistoryMode = HistoryMode.FULL,
    include_scores: bool = True,
    template: int = 0,
) -> str:
    tpl = TEMPLATES[template]
    shown = visible_history(prefix, history_mode)
    history = "\n".join(history_line(x, titles, include_scores) for x in shown)
    cands = "\n".join(_title(titles, i) for i in candidates.items)
    return f"{tpl.history_prefix}\n{history}\n\n{tpl.candidate_prefix}\n{cands}\n\n{tpl.instruction}"


def template_for(seed: int, user_id: int, cut: int) -> int:
    digest = hashlib.sha256(f"{seed}:{user_id}:{cut}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % len(TEMPLATES)


@dataclass(frozen=True)
class PromptRecord:
    prompt: str
    chosen: str
    rejected: tuple[str, ...]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": list(self.rejected),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptRecord":
        return cls(d["prompt"], d["chosen"], tuple(d["rejected"]), d["metadata"])


def build_record(
    example: TrainExample, titles: dict[int, str], cfg: RunConfig, spec: MarginSpec | None = None
) -> PromptRecord:
    spec = spec or cfg.margin
    g = example.group
    tpl = template_for(cfg.seed, g.user_id, g.cut)
    prompt = render_prompt(
        example.sequence.prefix(g.cut),
        g.candidates,
        titles,
        cfg.data.history_mode,
        cfg.data.include_scores,
        tpl,
    )
    pref = (g.preferred.score, g.preferred.latency)
    meta = {
        "user_id": g.user_id,
        "t": g.cut,
        "template": tpl,
        "preferred": {"item_id": g.preferred.item_id, "score": g.preferred.score, "latency": g.preferred.latency},
        "rejected": [
            {
                "item_id": d.item_id,
                "score": d.score,
                "latency": d.latency,
                "margin": margin(spec, pref, (d.score, d.latency)),
            }
            for d in g.dispreferred
        ],
    }
    return PromptRecord(
        prompt=prompt,
        chosen=_title(titles, g.preferred.item_id),
        rejected=tuple(_title(titles, d.item_id) for d in g.dispreferred),
        metadata=meta,
    )


def export_jsonl(records: Iterable[PromptRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> list[PromptRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PromptRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
