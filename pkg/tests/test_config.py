import json

import pytest

from recpo_lab.cli import bundled_path
from recpo_lab.config import (
    ConfigError,
    HistoryMode,
    MarginKind,
    MarginSign,
    RunConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)


def test_defaults():
    cfg = RunConfig()
    assert (cfg.beta, cfg.margin.lam, cfg.margin.kind, cfg.margin.sign) == (1.0, 2.0, MarginKind.RATIO, MarginSign.SUBTRACT_GAP)
    assert cfg.data.negatives_per_group == 3 and cfg.data.candidate_size == 20
    assert cfg.data.history_mode is HistoryMode.FULL and cfg.data.include_scores


def test_bundled_defaults_in_sync():
    assert json.loads(bundled_path("default_config.json").read_text()) == config_to_dict(RunConfig())


def test_dict_round_trip(tmp_path):
    cfg = RunConfig(seed=9).with_overrides(["margin.kind=log_ratio", "data.history_mode=filtered", "bucket_edges=[5,15]"])
    assert config_from_dict(config_to_dict(cfg)) == cfg
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_override_parsing():
    cfg = RunConfig().with_overrides(["margin.lam=0", "data.include_scores=false", "optim.lr_align=3e-4"])
    assert cfg.margin.lam == 0.0 and isinstance(cfg.margin.lam, float)
    assert cfg.data.include_scores is False
    assert cfg.optim.lr_align == 3e-4


def test_partial_file_merges_onto_defaults(tmp_path):
    (tmp_path / "c.json").write_text('{"margin": {"lam": 1.5}, "seed": 4}')
    cfg = load_config(tmp_path / "c.json", ["beta=0.5"])
    assert (cfg.margin.lam, cfg.seed, cfg.beta) == (1.5, 4, 0.5)
    assert cfg.margin.kind is MarginKind.RATIO


def test_evolve_accepts_enums():
    assert RunConfig().evolve(**{"margin.sign": MarginSign.ADD_GAP}).margin.sign is MarginSign.ADD_GAP


@pytest.mark.parametrize(
    "override",
    [
        "margin.lambda=1",
        "nope=1",
        "data.negatives_per_group=20",
        "data.negatives_per_group=0",
        "margin.lam=-1",
        "margin.kind=cubic",
        "beta=0",
        "data.latency_unit=days",
        "missing_equals",
    ],
)
def test_invalid_overrides_raise(override):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides([override])


def test_unknown_file_key_and_bad_json(tmp_path):
    (tmp_path / "a.json").write_text('{"margin": {"gamma": 1}}')
    with pytest.raises(ConfigError, match="margin.gamma"):
        load_config(tmp_path / "a.json")
    (tmp_path / "b.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "b.json")


def test_error_message_names_both_values():
    with pytest.raises(ConfigError, match=r"\(25\).*\(20\)"):
        RunConfig().with_overrides(["data.negatives_per_group=25"])
