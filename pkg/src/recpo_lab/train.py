"""Two-stage training: SFT, then preference alignment from the SFT checkpoint."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import objectives as obj
from .config import Objective, RunConfig
from .evaluate import PolicyScorer, hit_ratio_at1
from .pipeline import SplitDataset, TrainExample
from .policy import (
    ContextBatch,
    PolicyParams,
    encode_contexts,
    forward_logprobs,
    init_params,
    loss_and_grad,
    sft_loss_grad,
    snapshot_reference,
)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
REFERENCE_BASED = (Objective.DPO, Objective.SDPO, Objective.RECPO)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    params: PolicyParams
    reference: PolicyParams | None = None
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: float | None = None

    def __post_init__(self) -> None:
        tensors = self.params.tensors()
        if not self.first_moment:
            self.first_moment = {k: np.zeros_like(v, dtype=float) for k, v in tensors.items()}
            self.second_moment = {k: np.zeros_like(v, dtype=float) for k, v in tensors.items()}
        for k, v in tensors.items():
            if self.first_moment[k].shape != np.shape(v) or self.second_moment[k].shape != np.shape(v):
                raise ValueError(f"optimizer moment shape mismatch for {k}")


def adam_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0) -> TrainState:
    """One bias-corrected Adam update (decoupled weight decay when ``weight_decay > 0``)."""
    tensors = state.params.tensors()
    if set(grads) != set(tensors):
        raise ValueError(f"gradient keys {sorted(grads)} do not match parameters {sorted(tensors)}")
    t = state.step + 1
    m_new, v_new, updated = {}, {}, {}
    for k, p in tensors.items():
        g = np.asarray(grads[k], dtype=float)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {np.shape(p)}")
        m = ADAM_BETA1 * state.first_moment[k] + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.second_moment[k] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        new = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if weight_decay and k == "embeddings":
            new = new - lr * weight_decay * p
        m_new[k], v_new[k], updated[k] = m, v, new
    return replace(
        state,
        params=state.params.with_tensors(updated),
        first_moment=m_new,
        second_moment=v_new,
        step=t,
    )


def grad_check(
    fun: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    point: dict[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1e-8, |numeric|), central differences."""
    point = {k: np.array(v, dtype=float) for k, v in point.items()}
    _, analytic = fun(point)
    worst = 0.0
    for name, value in point.items():
        flat = value.reshape(-1)
        ana = np.asarray(analytic[name], dtype=float).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = fun(point)
            flat[i] = orig - step
            down, _ = fun(point)
            flat[i] = orig
            num = (up - down) / (2 * step)
            worst = max(worst, abs(ana[i] - num) / max(1e-8, abs(num)))
    return worst


# ---------------------------------------------------------------- prepared data


@dataclass(frozen=True)
class PreparedGroups:
    batch: ContextBatch
    pref: np.ndarray  # N vocabulary indices
    neg: np.ndarray  # N x J vocabulary indices
    pref_sl: np.ndarray  # N x 2 (score, latency)
    neg_sl: np.ndarray  # N x J x 2

    def __len__(self) -> int:
        return self.pref.shape[0]


def prepare_groups(examples: Sequence[TrainExample], params: PolicyParams, cfg: RunConfig) -> PreparedGroups:
    index = params.index()
    batch = encode_contexts(
        [(e.sequence, e.cut) for e in examples],
        index,
        cfg.data.history_mode,
        cfg.data.include_scores,
        cfg.policy.max_history,
    )
    groups = [e.group for e in examples]
    return PreparedGroups(
        batch=batch,
        pref=np.array([index[g.preferred.item_id] for g in groups], dtype=np.int64),
        neg=np.array([[index[d.item_id] for d in g.dispreferred] for g in groups], dtype=np.int64),
        pref_sl=np.array([[g.preferred.score, g.preferred.latency] for g in groups], dtype=float),
        neg_sl=np.array([[[d.score, d.latency] for d in g.dispreferred] for g in groups], dtype=float),
    )


def gathered_logprobs(params: PolicyParams, data: PreparedGroups, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Log-probabilities of each group's preferred and dispreferred items."""
    pref, neg = [], []
    for start in range(0, len(data), chunk):
        rows = np.arange(start, min(start + chunk, len(data)))
        logp = forward_logprobs(params, data.batch.take(rows))
        pref.append(logp[np.arange(len(rows)), data.pref[rows]])
        neg.append(np.take_along_axis(logp, data.neg[rows], axis=1))
    return np.concatenate(pref), np.concatenate(neg)


def group_loss(
    objective: Objective,
    cfg: RunConfig,
    logp_pref: float,
    logp_neg: np.ndarray,
    ref_pref: float,
    ref_neg: np.ndarray,
    pref_sl: np.ndarray,
    neg_sl: np.ndarray,
) -> obj.GroupLossResult:
    """Dispatch one group to its loss; DPO and SimPO use the first dispreferred item only."""
    beta = cfg.beta
    if objective is Objective.DPO:
        return obj.dpo_loss_grad(logp_pref, ref_pref, logp_neg[0], ref_neg[0], beta)
    if objective is Objective.SIMPO:
        return obj.simpo_loss_grad(logp_pref, logp_neg[0], beta, cfg.simpo_margin)
    if objective is Objective.SDPO:
        return obj.sdpo_loss_grad(logp_pref, ref_pref, logp_neg, ref_neg, beta)
    if objective is Objective.RECPO:
        return obj.recpo_loss_grad(
            logp_pref,
            ref_pref,
            logp_neg,
            ref_neg,
            beta,
            cfg.margin,
            (float(pref_sl[0]), float(pref_sl[1])),
            [(float(s), float(lat)) for s, lat in neg_sl],
        )
    raise ValueError(f"{objective.value} is not an alignment objective")


def alignment_batch_loss(
    objective: Objective,
    cfg: RunConfig,
    logp: np.ndarray,
    rows: np.ndarray,
    data: PreparedGroups,
    ref_pref: np.ndarray,
    ref_neg: np.ndarray,
) -> tuple[float, np.ndarray, int]:
    """Mean group loss over ``rows`` and its gradient w.r.t. the B x V log-prob table."""
    b = len(rows)
    grad = np.zeros_like(logp)
    total, clamped = 0.0, 0
    j = data.neg.shape[1] if objective in (Objective.SDPO, Objective.RECPO) else 1
    for r, i in enumerate(rows):
        res = group_loss(
            objective,
            cfg,
            logp[r, data.pref[i]],
            logp[r, data.neg[i]],
            ref_pref[i],
            ref_neg[i],
            data.pref_sl[i],
            data.neg_sl[i],
        )
        total += res.loss
        clamped += res.clamped
        grad[r, data.pref[i]] += res.grad_pref / b
        grad[r, data.neg[i, :j]] += res.grad_disp / b
    return total / b, grad, clamped


# ---------------------------------------------------------------- loops


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_hr1: float | None

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss, "valid_hr1": self.valid_hr1}


@dataclass
class TrainResult:
    objective: Objective
    state: TrainState
    best_params: PolicyParams
    best_epoch: int
    history: list[EpochRecord]
    clamped_margins: int = 0

    def manifest(self) -> dict:
        return {
            "objective": self.objective.value,
            "best_epoch": self.best_epoch,
            "steps": self.state.step,
            "initial_loss": self.state.initial_loss,
            "clamped_margins": self.clamped_margins,
            "epochs": [r.to_dict() for r in self.history],
        }


def _shuffle_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x7472, stage, epoch]))


def _check_finite(loss: float, state: TrainState, stage: str, epoch: int) -> None:
    if not math.isfinite(loss) or not state.params.is_finite():
        raise TrainingDiverged(
            f"{stage} diverged at epoch {epoch}, step {state.step}: loss={loss}, "
            f"eta={state.params.eta}, score_gain={state.params.score_gain}, "
            f"max|embedding|={np.nanmax(np.abs(state.params.embeddings)):.3g}"
        )


def _valid_hr(params: PolicyParams, split: SplitDataset, cfg: RunConfig) -> float | None:
    if not split.valid:
        return None
    return hit_ratio_at1(PolicyScorer.from_config(params, cfg), split.valid).rate


def _run_epochs(
    state: TrainState,
    n_examples: int,
    step_fn: Callable[[TrainState, np.ndarray], tuple[TrainState, float, int]],
    split: SplitDataset,
    cfg: RunConfig,
    epochs: int,
    stage: int,
    stage_name: str,
) -> tuple[TrainState, PolicyParams, int, list[EpochRecord], int]:
    best_params, best_hr, best_epoch = state.params, -1.0, 0
    history: list[EpochRecord] = []
    since_best, clamped_total = 0, 0
    bs = cfg.optim.batch_size
    for epoch in range(1, epochs + 1):
        order = _shuffle_rng(cfg.seed, stage, epoch).permutation(n_examples)
        losses = []
        for start in range(0, n_examples, bs):
            rows = order[start : start + bs]
            state, loss, clamped = step_fn(state, rows)
            clamped_total += clamped
            _check_finite(loss, state, stage_name, epoch)
            losses.append(loss * len(rows))
        mean_loss = float(np.sum(losses) / max(1, n_examples))
        state.epoch_losses.append(mean_loss)
        hr = _valid_hr(state.params, split, cfg)
        history.append(EpochRecord(epoch, mean_loss, hr))
        logger.info("%s epoch %d loss %.5f valid HR@1 %s", stage_name, epoch, mean_loss, hr)
        score = -1.0 if hr is None else hr
        if score > best_hr:
            best_params, best_hr, best_epoch, since_best = state.params, score, epoch, 0
        else:
            since_best += 1
            if since_best >= cfg.optim.patience:
                break
    return state, best_params, best_epoch, history, clamped_total


def train_sft(split: SplitDataset, cfg: RunConfig, init: PolicyParams | None = None) -> TrainResult:
    """Minimise the mean negative log-likelihood of each training cut's ground truth."""
    if not split.train:
        raise ValueError("no training examples")
    params = init or init_params(split.vocab, cfg.policy, cfg.seed)
    data = prepare_groups(split.train, params, cfg)
    state = TrainState(params)
    state.initial_loss = sft_loss_grad(params, data.batch, data.pref)[0]

    def step(st: TrainState, rows: np.ndarray) -> tuple[TrainState, float, int]:
        loss, grads = sft_loss_grad(st.params, data.batch.take(rows), data.pref[rows])
        return adam_step(st, grads, cfg.optim.lr_sft, cfg.optim.weight_decay), loss, 0

    state, best, best_epoch, history, _ = _run_epochs(
        state, len(data), step, split, cfg, cfg.optim.epochs_sft, 1, "sft"
    )
    return TrainResult(Objective.SFT, state, best, best_epoch, history)


def train_align(
    sft_params: PolicyParams, split: SplitDataset, cfg: RunConfig, objective: Objective | None = None
) -> TrainResult:
    """Optimise an alignment loss starting from, and referenced to, the SFT policy."""
    objective = objective or cfg.objective
    if objective is Objective.SFT:
        raise ValueError("use train_sft for the SFT objective")
    if not split.train:
        raise ValueError("no training examples")
    reference = snapshot_reference(sft_params) if objective in REFERENCE_BASED else None
    data = prepare_groups(split.train, sft_params, cfg)
    if reference is not None:
        ref_pref, ref_neg = gathered_logprobs(reference, data)
    else:
        ref_pref, ref_neg = np.zeros(len(data)), np.zeros(data.neg.shape)

    state = TrainState(sft_params, reference=reference)
    all_rows = np.arange(len(data))
    init_logp = forward_logprobs(sft_params, data.batch)
    state.initial_loss = alignment_batch_loss(objective, cfg, init_logp, all_rows, data, ref_pref, ref_neg)[0]

    def step(st: TrainState, rows: np.ndarray) -> tuple[TrainState, float, int]:
        info: dict = {}

        def fn(logp: np.ndarray) -> tuple[float, np.ndarray]:
            loss, g, clamped = alignment_batch_loss(objective, cfg, logp, rows, data, ref_pref, ref_neg)
            info["clamped"] = clamped
            return loss, g

        loss, grads, _ = loss_and_grad(st.params, data.batch.take(rows), fn)
        return adam_step(st, grads, cfg.optim.lr_align, cfg.optim.weight_decay), loss, info["clamped"]

    state, best, best_epoch, history, clamped = _run_epochs(
        state, len(data), step, split, cfg, cfg.optim.epochs_align, 2, objective.value
    )
    return TrainResult(objective, state, best, best_epoch, history, clamped)

