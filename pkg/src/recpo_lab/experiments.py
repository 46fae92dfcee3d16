"""End-to-end runs: split, SFT, alignment, evaluation, and the ablation sweeps."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

from .config import HistoryMode, MarginKind, Objective, RunConfig
from .domain import UserSequence
from .evaluate import METRIC_NAMES, MetricReport, PolicyScorer, evaluate_all
from .ingest import SyntheticSpec, generate_synthetic
from .pipeline import SplitDataset, build_splits
from .policy import PolicyParams
from .train import TrainResult, train_align, train_sft

logger = logging.getLogger(__name__)


def make_split(sequences: Sequence[UserSequence], cfg: RunConfig) -> SplitDataset:
    return build_splits(sequences, cfg.data, cfg.margin, cfg.seed)


def evaluate_params(params: PolicyParams, split: SplitDataset, cfg: RunConfig, label: str = "") -> MetricReport:
    return evaluate_all(
        PolicyScorer.from_config(params, cfg),
        split.test,
        split.adherence,
        split.avoidance,
        split.aversion,
        cfg.bucket_edges,
        cfg,
        label,
    )


@dataclass
class RunOutcome:
    objective: Objective
    result: TrainResult
    report: MetricReport


def run_objectives(
    sequences: Sequence[UserSequence],
    cfg: RunConfig,
    objectives: Sequence[Objective] = (Objective.SFT, Objective.SDPO, Objective.RECPO),
    split: SplitDataset | None = None,
) -> dict[Objective, RunOutcome]:
    """Train SFT once, then each requested alignment objective from that checkpoint."""
    split = split or make_split(sequences, cfg)
    sft = train_sft(split, cfg)
    out = {}
    if Objective.SFT in objectives:
        out[Objective.SFT] = RunOutcome(Objective.SFT, sft, evaluate_params(sft.best_params, split, cfg, "sft"))
    for objective in objectives:
        if objective is Objective.SFT:
            continue
        res = train_align(sft.best_params, split, cfg, objective)
        out[objective] = RunOutcome(objective, res, evaluate_params(res.best_params, split, cfg, objective.value))
    return out


@dataclass(frozen=True)
class AblationRow:
    method: str
    kind: str | None
    lam: float | None
    metrics: dict[str, float | None]
    final_train_loss: float

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "kind": self.kind,
            "lambda": self.lam,
            "final_train_loss": self.final_train_loss,
            "metrics": self.metrics,
        }


def _metrics_of(report: MetricReport) -> dict[str, float | None]:
    return {name: report.rate(name) for name in METRIC_NAMES}


def _ablation_cell(args: tuple) -> AblationRow:
    sft_params, split, cfg, kind, lam = args
    if kind is None:
        res = train_align(sft_params, split, cfg, Objective.SDPO)
        method = "sdpo"
    else:
        cell_cfg = cfg.evolve(**{"margin.kind": kind.value, "margin.lam": lam})
        res = train_align(sft_params, split, cell_cfg, Objective.RECPO)
        method = "recpo"
    report = evaluate_params(res.best_params, split, cfg, method)
    return AblationRow(
        method,
        None if kind is None else kind.value,
        None if kind is None else lam,
        _metrics_of(report),
        res.state.epoch_losses[-1],
    )


def ablate(
    sequences: Sequence[UserSequence],
    cfg: RunConfig,
    kinds: Sequence[MarginKind] = tuple(MarginKind),
    lambdas: Sequence[float] | None = None,
    jobs: int = 1,
    split: SplitDataset | None = None,
) -> list[AblationRow]:
    """S-DPO baseline plus one RecPO row per (margin kind, lambda), all from one SFT checkpoint."""
    lambdas = tuple(cfg.ablate_lambdas if lambdas is None else lambdas)
    split = split or make_split(sequences, cfg)
    sft = train_sft(split, cfg)
    cells: list[tuple] = [(sft.best_params, split, cfg, None, None)]
    seen = set()
    for kind in kinds:
        for lam in lambdas:
            if (kind, lam) in seen:
                continue
            seen.add((kind, lam))
            cells.append((sft.best_params, split, cfg, kind, float(lam)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_ablation_cell, cells))
    else:
        rows = [_ablation_cell(c) for c in cells]
    sft_report = evaluate_params(sft.best_params, split, cfg, "sft")
    sft_row = AblationRow("sft", None, None, _metrics_of(sft_report), sft.state.epoch_losses[-1])
    return [sft_row, *rows]


def ablation_table(rows: Sequence[AblationRow]) -> str:
    short = {"hit_ratio_at1": "HR@1", "valid_ratio": "valid", "adherence_rate": "adhere",
             "avoidance_rate": "avoid", "aversion_accuracy": "aversion"}
    head = f"{'method':<7} {'kind':<10} {'lambda':>6} " + " ".join(f"{short[m]:>8}" for m in METRIC_NAMES)
    head += f" {'loss':>9}"
    lines = [head]
    for r in rows:
        cells = " ".join("-".rjust(8) if r.metrics[m] is None else f"{r.metrics[m]:8.4f}" for m in METRIC_NAMES)
        lam = "-" if r.lam is None else f"{r.lam:g}"
        lines.append(f"{r.method:<7} {r.kind or '-':<10} {lam:>6} {cells} {r.final_train_loss:9.5f}")
    return "\n".join(lines) + "\n"


@dataclass
class DirectionalResult:
    """Test HR@1 per paired seed for SFT, S-DPO, RecPO and the filtered/no-scores SFT variant."""

    seeds: list[int]
    hr: dict[str, list[float]]

    def mean(self, name: str) -> float:
        return sum(self.hr[name]) / len(self.hr[name])

    def checks(self) -> dict[str, bool]:
        m = self.mean
        return {
            "recpo >= sdpo": m("recpo") >= m("sdpo"),
            "sdpo >= sft": m("sdpo") >= m("sft"),
            "recpo >= sft": m("recpo") >= m("sft"),
            "full+scores >= filtered/no-scores": m("sft") >= m("sft_filtered"),
        }

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "hr": self.hr, "mean": {k: self.mean(k) for k in self.hr}, "checks": self.checks()}


def directional_benchmark(spec: SyntheticSpec, cfg: RunConfig, seeds: Sequence[int] = range(5)) -> DirectionalResult:
    """Seed s drives both the generated dataset and the run, so every method sees the same data per seed."""
    hr: dict[str, list[float]] = {"sft": [], "sdpo": [], "recpo": [], "sft_filtered": []}
    for seed in seeds:
        data = generate_synthetic(replace(spec, seed=seed))
        run_cfg = cfg.evolve(seed=seed)
        split = make_split(data.sequences, run_cfg)
        outcomes = run_objectives(data.sequences, run_cfg, split=split)
        for objective, outcome in outcomes.items():
            hr[objective.value].append(outcome.report.rate("hit_ratio_at1"))
        filt_cfg = run_cfg.evolve(**{"data.history_mode": HistoryMode.FILTERED.value, "data.include_scores": False})
        filt = train_sft(split, filt_cfg)
        hr["sft_filtered"].append(evaluate_params(filt.best_params, split, filt_cfg).rate("hit_ratio_at1"))
        logger.info("seed %d: %s", seed, {k: round(v[-1], 4) for k, v in hr.items()})
    return DirectionalResult(list(seeds), hr)
