"""Command-line entry point: ``recpo-lab <verb> [options]``.

Verbs: ingest, synth, split, export-prompts, train, eval, ablate. Every verb
writes its artifacts plus a ``manifest.json`` (config echo, seed, sha256 of
inputs) into the output directory, which defaults to ``$RECPO_LAB_OUT`` or
``./runs``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ConfigError, MarginKind, Objective, RunConfig, config_to_dict, load_config
from .experiments import ablate, ablation_table, evaluate_params, make_split
from .ingest import (
    SyntheticSpec,
    generate_synthetic,
    ingest_events,
    load_dataset,
    parse_csv,
    parse_movielens,
    save_dataset,
)
from .evaluate import emit_report, write_decision_log
from .pipeline import export_manifest
from .policy import load_params, save_params
from .prompts import build_record, export_jsonl
from .train import train_align, train_sft

logger = logging.getLogger("recpo_lab")

OUT_ENV = "RECPO_LAB_OUT"


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("recpo_lab") / "data" / name))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(
    args: argparse.Namespace, out: Path, cfg: RunConfig, inputs: dict[str, str | None], outputs: list[str], extra: dict | None = None
) -> None:
    doc = {
        "tool": "recpo-lab",
        "version": __version__,
        "verb": args.verb,
        "argv": args.argv,
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "inputs": {k: {"path": v, "sha256": sha256_file(v)} for k, v in inputs.items() if v},
        "outputs": outputs,
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def _load_split(args: argparse.Namespace, cfg: RunConfig):
    sequences, titles = load_dataset(args.data)
    return sequences, titles, make_split(sequences, cfg)


# ---------------------------------------------------------------- verbs


def cmd_ingest(args: argparse.Namespace) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    if args.format == "movielens":
        parsed = parse_movielens(args.ratings, args.movies)
    else:
        parsed = parse_csv(args.ratings)
    sequences = ingest_events(parsed.events, cfg.data.kcore, cfg.data.implicit, cfg.data.percentile_pool)
    titles = parsed.titles or {i: f"Item {i}" for s in sequences for i in s.item_ids}
    save_dataset(out / "dataset.json", sequences, titles)
    _write_manifest(
        args, out, cfg, {"ratings": args.ratings, "movies": args.movies}, ["dataset.json"],
        {"users": len(sequences), "events": sum(len(s) for s in sequences), "skipped_lines": parsed.skipped},
    )
    print(f"{len(sequences)} users, {sum(len(s) for s in sequences)} events -> {out / 'dataset.json'}")


def cmd_synth(args: argparse.Namespace) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    spec_path = args.spec or bundled_path("synthetic_default.json")
    spec = SyntheticSpec.from_json(spec_path)
    if args.seed is not None:
        spec = SyntheticSpec(**{**spec.to_dict(), "thresholds": spec.thresholds, "seed": args.seed})
    data = generate_synthetic(spec)
    save_dataset(out / "dataset.json", data.sequences, data.titles)
    (out / "synthetic_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    _write_manifest(args, out, cfg, {"spec": str(spec_path)}, ["dataset.json", "synthetic_spec.json"])
    print(f"{len(data.sequences)} synthetic users -> {out / 'dataset.json'}")


def cmd_split(args: argparse.Namespace) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    _, _, split = _load_split(args, cfg)
    counts = {}
    for name in ("train", "valid", "test", "adherence", "avoidance", "aversion"):
        counts[name] = export_manifest(getattr(split, name), out / f"{name}.jsonl")
    _write_manifest(
        args, out, cfg, {"data": args.data}, [f"{n}.jsonl" for n in counts],
        {"counts": counts, "skipped_cuts": split.skipped_cuts},
    )
    print(" ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_export_prompts(args: argparse.Namespace) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    _, titles, split = _load_split(args, cfg)
    n = export_jsonl((build_record(ex, titles, cfg) for ex in split.train), out / "prompts.jsonl")
    _write_manifest(args, out, cfg, {"data": args.data}, ["prompts.jsonl"], {"records": n})
    print(f"{n} preference records -> {out / 'prompts.jsonl'}")


def cmd_train(args: argparse.Namespace) -> None:
    cfg = _config(args)
    objective = Objective(args.objective) if args.objective else cfg.objective
    cfg = cfg.evolve(objective=objective.value)
    out = _out_dir(args)
    _, _, split = _load_split(args, cfg)
    init = load_params(args.init)[0] if args.init else None
    if objective is Objective.SFT:
        result = train_sft(split, cfg, init)
    else:
        if init is None:
            raise ValueError(f"{objective.value} trains from an SFT checkpoint; pass --init")
        result = train_align(init, split, cfg, objective)
    meta = {"objective": objective.value, "best_epoch": result.best_epoch}
    save_params(result.best_params, out / "best.ckpt", meta)
    save_params(result.state.params, out / "last.ckpt", meta)
    _write_manifest(
        args, out, cfg, {"data": args.data, "init": args.init}, ["best.ckpt", "last.ckpt"],
        {"training": result.manifest()},
    )
    last = result.history[-1]
    print(f"{objective.value}: {len(result.history)} epochs, best epoch {result.best_epoch}, final loss {last.train_loss:.5f}")


def cmd_eval(args: argparse.Namespace) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    _, _, split = _load_split(args, cfg)
    params, meta = load_params(args.checkpoint)
    report = evaluate_params(params, split, cfg, meta.get("objective", ""))
    emit_report(report, out / "report.json", "json")
    emit_report(report, out / "report.txt", "text")
    write_decision_log(report, out / "decisions.jsonl")
    _write_manifest(
        args, out, cfg, {"data": args.data, "checkpoint": args.checkpoint},
        ["report.json", "report.txt", "decisions.jsonl"],
    )
    print(report.to_text(), end="")


def _csv(kind):
    def parse(text: str):
        try:
            return tuple(kind(x) for x in text.split(",") if x.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def cmd_ablate(args: argparse.Namespace) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    sequences, _, split = _load_split(args, cfg)
    kinds = args.kinds or tuple(MarginKind)
    rows = ablate(sequences, cfg, kinds, args.lambdas, args.jobs, split)
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n")
    _write_manifest(args, out, cfg, {"data": args.data}, ["ablation.json", "ablation.txt"])
    print(table, end="")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; missing keys take the defaults")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="recpo-lab", description="Adaptive-margin preference optimisation lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("ingest", parents=[common], help="raw ratings -> dataset.json")
    p.add_argument("--ratings", required=True)
    p.add_argument("--movies", help="MovieLens movies.dat for titles")
    p.add_argument("--format", choices=("movielens", "csv"), default="movielens")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    p.add_argument("--spec", help="synthetic spec JSON (defaults to the bundled one)")
    p.set_defaults(func=cmd_synth)

    for verb, func, helptext in (
        ("split", cmd_split, "write candidate-set manifests"),
        ("export-prompts", cmd_export_prompts, "write prompt/chosen/rejected JSON Lines"),
    ):
        p = sub.add_parser(verb, parents=[common], help=helptext)
        p.add_argument("--data", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("train", parents=[common], help="SFT or preference alignment")
    p.add_argument("--data", required=True)
    p.add_argument("--objective", choices=[o.value for o in Objective])
    p.add_argument("--init", help="starting checkpoint (required for alignment objectives)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metrics report and decision log")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="margin kind x lambda sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--kinds", type=_csv(MarginKind), help="comma list of ratio,log_diff,log_ratio")
    p.add_argument("--lambdas", type=_csv(float), help="comma list, default from config")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except ConfigError as exc:
        parser.exit(2, f"recpo-lab: config error: {exc}\n")
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"recpo-lab {args.verb}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
