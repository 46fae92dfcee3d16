"""Run configuration: margin settings, data protocol knobs, policy and optimizer hyperparameters.

Configs are plain frozen dataclasses serialised to a single JSON document.
Command-line overrides use dotted paths (``margin.lam=3``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints


class MarginKind(str, Enum):
    RATIO = "ratio"
    LOG_DIFF = "log_diff"
    LOG_RATIO = "log_ratio"


class MarginSign(str, Enum):
    # SUBTRACT_GAP: the preferred item must beat each negative by gamma.
    # ADD_GAP: gamma enters the listwise exponent with the opposite sign.
    SUBTRACT_GAP = "subtract_gap"
    ADD_GAP = "add_gap"


class HistoryMode(str, Enum):
    FILTERED = "filtered"
    FULL = "full"


class Objective(str, Enum):
    SFT = "sft"
    DPO = "dpo"
    SIMPO = "simpo"
    SDPO = "sdpo"
    RECPO = "recpo"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MarginSpec:
    kind: MarginKind = MarginKind.RATIO
    lam: float = 2.0
    alpha: float = 0.5
    sign: MarginSign = MarginSign.SUBTRACT_GAP
    default_score: float = 3.0
    default_latency: float = 5.0
    log_diff_floor: float = 1e-6

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"margin lambda must be >= 0, got {self.lam}")
        if self.alpha <= 0:
            raise ConfigError(f"margin alpha must be > 0, got {self.alpha}")
        if not 1.0 <= self.default_score <= 5.0:
            raise ConfigError(f"default_score {self.default_score} outside [1, 5]")
        if self.default_latency < 1.0:
            raise ConfigError(f"default_latency {self.default_latency} < 1")
        if self.log_diff_floor <= 0:
            raise ConfigError("log_diff_floor must be positive")


@dataclass(frozen=True)
class DataConfig:
    candidate_size: int = 20
    num_future: int = 10
    negatives_per_group: int = 3
    per_user_cap: int = 16
    adherence_cap: int = 9
    history_mode: HistoryMode = HistoryMode.FULL
    include_scores: bool = True
    latency_unit: str = "rank"
    kcore: int = 5
    implicit: bool = False
    percentile_pool: str = "item"

    def __post_init__(self) -> None:
        if self.negatives_per_group < 1:
            raise ConfigError("negatives_per_group must be >= 1")
        if self.negatives_per_group >= self.candidate_size:
            raise ConfigError(
                f"negatives_per_group ({self.negatives_per_group}) must be < candidate_size ({self.candidate_size})"
            )
        if not 1 <= self.num_future <= self.candidate_size:
            raise ConfigError("num_future must lie in [1, candidate_size]")
        if self.latency_unit not in ("rank", "time"):
            raise ConfigError(f"latency_unit must be 'rank' or 'time', got {self.latency_unit!r}")
        if self.percentile_pool not in ("item", "user"):
            raise ConfigError(f"percentile_pool must be 'item' or 'user', got {self.percentile_pool!r}")
        if self.kcore < 1:
            raise ConfigError("kcore must be >= 1")


@dataclass(frozen=True)
class PolicyConfig:
    dim: int = 32
    init_scale: float = 0.1
    eta: float = 0.9
    score_gain: float = 0.5
    max_history: int = 50

    def __post_init__(self) -> None:
        if self.dim < 2:
            raise ConfigError("policy dim must be >= 2")
        if not 0 < self.eta <= 1:
            raise ConfigError("eta must lie in (0, 1]")


@dataclass(frozen=True)
class OptimConfig:
    # The LLM-scale settings (lr 1e-5, global batch 128, cosine schedule) do not
    # transfer to the toy policy; these are desk-scale values.
    lr_sft: float = 1e-2
    lr_align: float = 1e-3
    epochs_sft: int = 30
    epochs_align: int = 30
    batch_size: int = 64
    weight_decay: float = 0.0
    patience: int = 5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    objective: Objective = Objective.RECPO
    beta: float = 1.0
    simpo_margin: float = 2.0
    margin: MarginSpec = field(default_factory=MarginSpec)
    data: DataConfig = field(default_factory=DataConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    bucket_edges: tuple[int, ...] = (10, 20, 30, 40)
    ablate_lambdas: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 3.0)

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        return config_from_dict(apply_overrides(config_to_dict(self), overrides))

    def evolve(self, **changes: Any) -> "RunConfig":
        """Copy with dotted-path changes, e.g. ``evolve(**{"margin.lam": 0.0})``."""
        data = config_to_dict(self)
        for key, value in changes.items():
            _set_path(data, key, value.value if isinstance(value, Enum) else value)
        return config_from_dict(data)


def _plain(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def _build(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if is_dataclass(tp):
            value = _build(tp, value, f"{path}{name}.")
        elif isinstance(tp, type) and issubclass(tp, Enum):
            try:
                value = tp(value)
            except ValueError:
                allowed = ", ".join(m.value for m in tp)
                raise ConfigError(f"{path}{name}: {value!r} not one of {allowed}") from None
        elif get_origin(tp) is tuple:
            (inner, _) = get_args(tp)
            value = tuple(inner(v) for v in value)
        elif tp is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def _set_path(data: dict, dotted: str, value: Any) -> None:
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` strings; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(out, key.strip(), value)
    return out


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    data = config_to_dict(RunConfig())
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        _merge(data, user, "")
    return config_from_dict(apply_overrides(data, overrides or []))


def _merge(base: dict, update: dict, path: str) -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = value


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


__all__ = [
    "ConfigError",
    "DataConfig",
    "HistoryMode",
    "MarginKind",
    "MarginSign",
    "MarginSpec",
    "Objective",
    "OptimConfig",
    "PolicyConfig",
    "RunConfig",
    "apply_overrides",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "save_config",
]
