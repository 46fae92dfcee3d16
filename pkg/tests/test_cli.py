import json

import pytest

from recpo_lab.cli import main, sha256_file
from recpo_lab.ingest import load_dataset

from conftest import ML_TINY

FAST = ["--set", "policy.dim=8", "--set", "optim.epochs_sft=2", "--set", "optim.epochs_align=1"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """synth (bundled spec) -> split -> train sft -> train recpo -> eval."""
    root = tmp_path_factory.mktemp("chain")
    d = {k: root / k for k in ("synth", "split", "sft", "recpo", "eval")}
    assert run("synth", "--out", d["synth"]) == 0
    data = d["synth"] / "dataset.json"
    assert run("split", "--data", data, "--out", d["split"]) == 0
    assert run("train", "--data", data, "--objective", "sft", "--out", d["sft"], *FAST) == 0
    assert run("train", "--data", data, "--objective", "recpo", "--init", d["sft"] / "best.ckpt", "--out", d["recpo"], *FAST) == 0
    assert run("eval", "--data", data, "--checkpoint", d["recpo"] / "best.ckpt", "--out", d["eval"], *FAST) == 0
    return d


def test_bundled_spec_report_has_all_metrics(chain):
    report = json.loads((chain["eval"] / "report.json").read_text())
    assert set(report["metrics"]) == {
        "hit_ratio_at1", "valid_ratio", "adherence_rate", "avoidance_rate", "aversion_accuracy",
    }
    assert (chain["eval"] / "decisions.jsonl").stat().st_size > 0
    assert "coefficient of variation" in (chain["eval"] / "report.txt").read_text()


def test_split_manifests(chain):
    names = {p.name for p in chain["split"].glob("*.jsonl")}
    assert names == {f"{n}.jsonl" for n in ("train", "valid", "test", "adherence", "avoidance", "aversion")}
    manifest = json.loads((chain["split"] / "manifest.json").read_text())
    assert manifest["counts"]["test"] > 0


def test_train_manifest_is_replayable(chain):
    m = json.loads((chain["recpo"] / "manifest.json").read_text())
    assert m["verb"] == "train" and m["argv"][0] == "train"
    assert m["config"]["objective"] == "recpo" and m["config"]["policy"]["dim"] == 8
    assert m["inputs"]["init"]["sha256"] == sha256_file(chain["sft"] / "best.ckpt")
    assert m["inputs"]["data"]["sha256"] == sha256_file(chain["synth"] / "dataset.json")
    assert m["training"]["objective"] == "recpo" and m["training"]["epochs"]


def test_training_replays_bit_exactly(chain, tmp_path):
    data = chain["synth"] / "dataset.json"
    assert run("train", "--data", data, "--objective", "sft", "--out", tmp_path, *FAST) == 0
    assert (tmp_path / "best.ckpt").read_bytes() == (chain["sft"] / "best.ckpt").read_bytes()


def test_synth_seed_flag(tmp_path):
    assert run("synth", "--seed", 7, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "synthetic_spec.json").read_text())["seed"] == 7
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 7


def test_ingest_and_export_prompts(tmp_path):
    out = tmp_path / "ml"
    assert run("ingest", "--ratings", ML_TINY / "ratings.dat", "--movies", ML_TINY / "movies.dat", "--set", "data.kcore=1", "--out", out) == 0
    seqs, titles = load_dataset(out / "dataset.json")
    assert len(seqs) == 4 and titles[1] == "Toy Story"
    assert json.loads((out / "manifest.json").read_text())["skipped_lines"] == 1
    p = tmp_path / "p"
    assert run("export-prompts", "--data", out / "dataset.json", "--set", "data.include_scores=false", "--out", p) == 0
    first = json.loads((p / "prompts.jsonl").read_text().splitlines()[0])
    assert "Rating" not in first["prompt"]


def test_ablate_lambda_zero_row_equals_sdpo(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"num_users": 80, "num_items": 120, "min_length": 12, "max_length": 24}))
    assert run("synth", "--spec", spec, "--out", tmp_path) == 0
    data = tmp_path / "dataset.json"
    code = run("ablate", "--data", data, "--kinds", "ratio,log_ratio", "--lambdas", "0,2", "--out", tmp_path, *FAST)
    assert code == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())
    keys = [(r["method"], r["kind"], r["lambda"]) for r in rows]
    assert len(keys) == len(set(keys)) == 6  # sft, sdpo, 2 kinds x 2 lambdas
    sdpo = next(r for r in rows if r["method"] == "sdpo")
    for r in rows:
        if r["lambda"] == 0.0:
            assert r["metrics"] == sdpo["metrics"]
            assert r["final_train_loss"] == sdpo["final_train_loss"]
    assert "log_ratio" in (tmp_path / "ablation.txt").read_text()


def test_unknown_verb_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_override_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("synth", "--set", "margin.nope=1", "--out", tmp_path)
    assert exc.value.code == 2
    assert "margin.nope" in capsys.readouterr().err


def test_alignment_without_init_exits_1(chain, tmp_path, capsys):
    code = run("train", "--data", chain["synth"] / "dataset.json", "--objective", "sdpo", "--out", tmp_path)
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "--init" in err


def test_missing_input_exits_1(tmp_path, capsys):
    assert run("split", "--data", tmp_path / "none.json", "--out", tmp_path) == 1
    assert "error" in capsys.readouterr().err


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RECPO_LAB_OUT", str(tmp_path / "env"))
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"num_users": 5, "num_items": 60}))
    assert run("synth", "--spec", spec) == 0
    assert (tmp_path / "env" / "dataset.json").exists()
