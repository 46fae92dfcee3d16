"""Utilities, margins, margin-aware BT/PL probabilities and alignment losses.

Every loss returns its value together with analytic gradients with respect to
the *policy* log-probabilities of the preferred and dispreferred items. The
reference log-probabilities are constants.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .config import MarginKind, MarginSign, MarginSpec

ArrayLike = Sequence[float] | np.ndarray


@dataclass(frozen=True)
class GroupLossResult:
    loss: float
    grad_pref: float
    grad_disp: np.ndarray
    margins: np.ndarray
    clamped: int = 0


def _softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def phi(score: float, latency: float, alpha: float = 0.5) -> float:
    """Utility ``s / latency**alpha``: rises with the score, decays with latency."""
    if score <= 0:
        raise ValueError(f"score must be positive, got {score}")
    if latency < 1:
        raise ValueError(f"latency must be >= 1, got {latency}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return score / latency**alpha


def margin_with_flag(
    spec: MarginSpec, preferred: tuple[float, float], dispreferred: tuple[float, float]
) -> tuple[float, bool]:
    """Margin for one (preferred, dispreferred) pair plus whether the log-diff floor was hit."""
    phi_p = phi(preferred[0], preferred[1], spec.alpha)
    phi_d = phi(dispreferred[0], dispreferred[1], spec.alpha)
    if spec.kind is MarginKind.RATIO:
        return spec.lam * phi_p / phi_d, False
    if spec.kind is MarginKind.LOG_RATIO:
        return spec.lam * (math.log(phi_p) - math.log(phi_d)), False
    if spec.kind is MarginKind.LOG_DIFF:
        gap = phi_p - phi_d
        clamped = gap < spec.log_diff_floor
        return spec.lam * math.log(max(gap, spec.log_diff_floor)), clamped
    raise ValueError(f"unknown margin kind {spec.kind!r}")


def margin(spec: MarginSpec, preferred: tuple[float, float], dispreferred: tuple[float, float]) -> float:
    """Adaptive margin for a pair given as ``(score, latency)`` tuples."""
    return margin_with_flag(spec, preferred, dispreferred)[0]


def bt_margin_prob(r_p: float, r_d: float, gamma: float) -> float:
    """Bradley-Terry win probability of the preferred item with a subtracted margin."""
    return float(expit(r_p - r_d - gamma))


def _check_margin_matrix(gamma: np.ndarray, k: int, atol: float) -> None:
    if gamma.shape != (k, k):
        raise ValueError(f"margin matrix must be {k}x{k}, got {gamma.shape}")
    if not np.allclose(gamma, -gamma.T, atol=atol, rtol=0.0):
        raise ValueError("margin matrix must be antisymmetric (gamma_ij = -gamma_ji)")


def pl_ranking_log_likelihood(
    rewards: ArrayLike, gamma: np.ndarray | None, tau: Sequence[int], atol: float = 1e-12
) -> float:
    """Log-probability of the ranking ``tau`` under the margin-boosted Plackett-Luce model.

    At every step the remaining candidate ``k`` competes with effective log-weight
    ``r_k - sum_{j remaining, j != k} gamma_kj``.
    """
    r = np.asarray(rewards, dtype=float)
    k = r.shape[0]
    if k < 2:
        raise ValueError("need at least two candidates")
    if sorted(tau) != list(range(k)):
        raise ValueError(f"tau must be a permutation of 0..{k - 1}")
    g = np.zeros((k, k)) if gamma is None else np.asarray(gamma, dtype=float)
    _check_margin_matrix(g, k, atol)

    remaining = np.ones(k, dtype=bool)
    total = 0.0
    for chosen in tau[:-1]:
        idx = np.flatnonzero(remaining)
        sub = g[np.ix_(idx, idx)]
        # The diagonal of an antisymmetric matrix is zero, so row sums skip j == k.
        eff = r[idx] - sub.sum(axis=1)
        pos = int(np.searchsorted(idx, chosen))
        total += eff[pos] - logsumexp(eff)
        remaining[chosen] = False
    return float(total)


def pl_ranking_likelihood(
    rewards: ArrayLike, gamma: np.ndarray | None, tau: Sequence[int], atol: float = 1e-12
) -> float:
    return math.exp(pl_ranking_log_likelihood(rewards, gamma, tau, atol))


def plackett_luce_likelihood(rewards: ArrayLike, tau: Sequence[int]) -> float:
    """Standard Plackett-Luce likelihood, computed directly as a product of softmax choices."""
    w = [math.exp(float(x)) for x in rewards]
    prob = 1.0
    for j in range(len(tau)):
        prob *= w[tau[j]] / sum(w[tau[m]] for m in range(j, len(tau)))
    return prob


def all_rankings(k: int) -> list[tuple[int, ...]]:
    return list(itertools.permutations(range(k)))


def group_preference_prob(r_p: float, r_d: ArrayLike, gammas: ArrayLike) -> float:
    """Probability the preferred item beats every negative, boosted once by ``exp(-sum gamma)``."""
    r_d = np.asarray(r_d, dtype=float)
    boost = r_p - float(np.sum(gammas))
    # w_p e^{-sum g} / (w_p e^{-sum g} + sum_j w_dj), in log space
    return float(np.exp(boost - np.logaddexp(boost, logsumexp(r_d))))


def implicit_reward(logp_policy: ArrayLike, logp_ref: ArrayLike, beta: float) -> np.ndarray:
    return beta * (np.asarray(logp_policy, dtype=float) - np.asarray(logp_ref, dtype=float))


def dpo_loss_grad(
    logp_pref: float, ref_pref: float, logp_disp: float, ref_disp: float, beta: float
) -> GroupLossResult:
    gap = beta * (logp_pref - ref_pref) - beta * (logp_disp - ref_disp)
    s = float(expit(-gap))
    return GroupLossResult(
        loss=_softplus(-gap),
        grad_pref=-beta * s,
        grad_disp=np.array([beta * s]),
        margins=np.zeros(1),
    )


def simpo_loss_grad(
    logp_pref: float,
    logp_disp: float,
    beta: float,
    gamma0: float = 2.0,
    len_pref: int = 1,
    len_disp: int = 1,
) -> GroupLossResult:
    if len_pref < 1 or len_disp < 1:
        raise ValueError("lengths must be >= 1")
    a, b = beta / len_pref, beta / len_disp
    gap = a * logp_pref - b * logp_disp - gamma0
    s = float(expit(-gap))
    return GroupLossResult(
        loss=_softplus(-gap),
        grad_pref=-a * s,
        grad_disp=np.array([b * s]),
        margins=np.array([gamma0]),
    )


def _listwise(exponents: np.ndarray, beta: float) -> tuple[float, float, np.ndarray]:
    # loss = -log sigma(-LSE(z)) = softplus(LSE(z))
    lse = float(logsumexp(exponents))
    s = float(expit(lse))
    weights = np.exp(exponents - lse)
    grad_disp = beta * s * weights
    return _softplus(lse), -beta * s, grad_disp


def _reward_gaps(
    logp_pref: float, ref_pref: float, logp_disp: ArrayLike, ref_disp: ArrayLike, beta: float
) -> np.ndarray:
    disp = np.asarray(logp_disp, dtype=float)
    ref = np.asarray(ref_disp, dtype=float)
    if disp.ndim != 1 or disp.size == 0 or disp.shape != ref.shape:
        raise ValueError("need one or more dispreferred log-probs with matching references")
    return beta * (disp - ref) - beta * (logp_pref - ref_pref)


def sdpo_loss_grad(
    logp_pref: float, ref_pref: float, logp_disp: ArrayLike, ref_disp: ArrayLike, beta: float
) -> GroupLossResult:
    z = _reward_gaps(logp_pref, ref_pref, logp_disp, ref_disp, beta)
    loss, gp, gd = _listwise(z, beta)
    return GroupLossResult(loss, gp, gd, np.zeros_like(z))


def recpo_loss_grad(
    logp_pref: float,
    ref_pref: float,
    logp_disp: ArrayLike,
    ref_disp: ArrayLike,
    beta: float,
    spec: MarginSpec,
    preferred: tuple[float, float],
    dispreferred: Sequence[tuple[float, float]],
) -> GroupLossResult:
    """Listwise loss with one adaptive margin per negative.

    ``preferred`` and ``dispreferred`` carry the ``(score, latency)`` pairs the
    margins are computed from.
    """
    z = _reward_gaps(logp_pref, ref_pref, logp_disp, ref_disp, beta)
    if len(dispreferred) != z.size:
        raise ValueError("one (score, latency) pair is required per dispreferred item")
    flagged = [margin_with_flag(spec, preferred, d) for d in dispreferred]
    gammas = np.array([g for g, _ in flagged])
    if spec.sign is MarginSign.SUBTRACT_GAP:
        exponents = z + gammas
    else:
        exponents = z - gammas
    loss, gp, gd = _listwise(exponents, beta)
    return GroupLossResult(loss, gp, gd, gammas, clamped=sum(c for _, c in flagged))
