"""Toy categorical policy over the item vocabulary.

The context vector is a recency- and score-weighted sum of history item
embeddings, normalised to unit length; logits are inner products with every
item embedding plus a bias, so log-probabilities are normalised over the whole
vocabulary. Forward and backward passes are batched over contexts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .config import HistoryMode, PolicyConfig
from .domain import HIGH_SCORE, Interaction, UserSequence

NORM_EPS = 1e-12
CHECKPOINT_MAGIC = b"RECPOLCY"
CHECKPOINT_VERSION = 1
TENSOR_NAMES = ("embeddings", "bias", "eta", "score_gain")


@dataclass(frozen=True)
class PolicyParams:
    vocab: tuple[int, ...]
    embeddings: np.ndarray
    bias: np.ndarray
    eta: float
    score_gain: float

    def __post_init__(self) -> None:
        v = len(self.vocab)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != v:
            raise ValueError(f"embeddings must be {v} x d, got {self.embeddings.shape}")
        if self.embeddings.shape[1] < 2:
            raise ValueError("embedding dimension must be >= 2")
        if self.bias.shape != (v,):
            raise ValueError(f"bias must have shape ({v},), got {self.bias.shape}")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index(self) -> dict[int, int]:
        return {item: i for i, item in enumerate(self.vocab)}

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "embeddings": self.embeddings,
            "bias": self.bias,
            "eta": np.array(self.eta),
            "score_gain": np.array(self.score_gain),
        }

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "PolicyParams":
        return PolicyParams(
            vocab=self.vocab,
            embeddings=np.array(tensors["embeddings"], dtype=float),
            bias=np.array(tensors["bias"], dtype=float),
            eta=float(np.clip(tensors["eta"], 1e-3, 1.0)),
            score_gain=float(tensors["score_gain"]),
        )

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.embeddings))
            and np.all(np.isfinite(self.bias))
            and np.isfinite(self.eta)
            and np.isfinite(self.score_gain)
        )


def init_params(vocab: Iterable[int], cfg: PolicyConfig, seed: int) -> PolicyParams:
    vocab = tuple(sorted(set(int(v) for v in vocab)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x706F6C]))
    emb = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(len(vocab), cfg.dim))
    return PolicyParams(vocab, emb, np.zeros(len(vocab)), cfg.eta, cfg.score_gain)


def snapshot_reference(params: PolicyParams) -> PolicyParams:
    """Deep, read-only copy used as the frozen reference policy."""
    emb = params.embeddings.copy()
    bias = params.bias.copy()
    emb.setflags(write=False)
    bias.setflags(write=False)
    return PolicyParams(params.vocab, emb, bias, params.eta, params.score_gain)


@dataclass(frozen=True)
class ContextBatch:
    """Padded history arrays for B contexts (padding has mask 0)."""

    hist: np.ndarray  # B x L vocabulary indices
    mask: np.ndarray  # B x L
    age: np.ndarray  # B x L, t - k
    centered: np.ndarray  # B x L, s_k - 3 (zero when scores are hidden)

    def __len__(self) -> int:
        return self.hist.shape[0]

    def take(self, rows: np.ndarray) -> "ContextBatch":
        return ContextBatch(self.hist[rows], self.mask[rows], self.age[rows], self.centered[rows])


def visible_history(
    prefix: Sequence[Interaction], history_mode: HistoryMode, max_history: int | None = None
) -> list[Interaction]:
    if history_mode is HistoryMode.FILTERED:
        items = [x for x in prefix if x.score >= HIGH_SCORE]
    else:
        items = list(prefix)
    if max_history:
        items = items[-max_history:]
    return items


def encode_contexts(
    contexts: Sequence[tuple[UserSequence, int]],
    index: dict[int, int],
    history_mode: HistoryMode = HistoryMode.FULL,
    include_scores: bool = True,
    max_history: int | None = None,
) -> ContextBatch:
    """Encode (sequence, cut) pairs; the history is every interaction at positions <= cut."""
    rows = []
    for seq, cut in contexts:
        prefix = seq.prefix(cut)
        if not prefix:
            raise ValueError(f"empty history for user {seq.user_id}")
        rows.append((cut, visible_history(prefix, history_mode, max_history)))
    width = max(1, max((len(h) for _, h in rows), default=1))
    b = len(rows)
    hist = np.zeros((b, width), dtype=np.int64)
    mask = np.zeros((b, width))
    age = np.zeros((b, width))
    centered = np.zeros((b, width))
    for r, (cut, items) in enumerate(rows):
        n = len(items)
        hist[r, :n] = [index[x.item_id] for x in items]
        mask[r, :n] = 1.0
        age[r, :n] = [cut - x.position for x in items]
        if include_scores:
            centered[r, :n] = [x.score - 3.0 for x in items]
    return ContextBatch(hist, mask, age, centered)


@dataclass
class _Cache:
    weights: np.ndarray
    decay: np.ndarray
    gathered: np.ndarray
    raw: np.ndarray
    norm: np.ndarray
    context: np.ndarray
    logp: np.ndarray


def _forward(params: PolicyParams, batch: ContextBatch) -> _Cache:
    decay = batch.mask * params.eta**batch.age
    weights = decay * (1.0 + params.score_gain * batch.centered)
    gathered = params.embeddings[batch.hist]  # B x L x d
    raw = np.einsum("bl,bld->bd", weights, gathered)
    norm = np.sqrt(np.sum(raw * raw, axis=1) + NORM_EPS)
    context = raw / norm[:, None]
    logits = context @ params.embeddings.T + params.bias
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    return _Cache(weights, decay, gathered, raw, norm, context, logp)


def forward_logprobs(params: PolicyParams, batch: ContextBatch) -> np.ndarray:
    """B x V table of log-probabilities over the full vocabulary."""
    return _forward(params, batch).logp


def backward(
    params: PolicyParams, batch: ContextBatch, cache: _Cache, grad_logp: np.ndarray
) -> dict[str, np.ndarray]:
    """Chain rule from dL/dlogp (B x V) to every parameter tensor."""
    probs = np.exp(cache.logp)
    d_logits = grad_logp - probs * grad_logp.sum(axis=1, keepdims=True)
    d_bias = d_logits.sum(axis=0)
    d_emb = d_logits.T @ cache.context
    d_context = d_logits @ params.embeddings
    n = cache.norm[:, None]
    proj = np.sum(d_context * cache.raw, axis=1, keepdims=True)
    d_raw = d_context / n - proj * cache.raw / n**3
    d_weights = np.einsum("bd,bld->bl", d_raw, cache.gathered)
    np.add.at(d_emb, batch.hist, cache.weights[..., None] * d_raw[:, None, :])
    gain = 1.0 + params.score_gain * batch.centered
    # d/d eta of eta**age is age * eta**(age-1); zero where age == 0
    d_decay_d_eta = np.where(batch.age > 0, batch.age * cache.decay / params.eta, 0.0)
    d_eta = np.sum(d_weights * d_decay_d_eta * gain)
    d_gain = np.sum(d_weights * cache.decay * batch.centered)
    return {
        "embeddings": d_emb,
        "bias": d_bias,
        "eta": np.array(d_eta),
        "score_gain": np.array(d_gain),
    }


def loss_and_grad(
    params: PolicyParams, batch: ContextBatch, grad_fn
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Run ``grad_fn(logp) -> (loss, dL/dlogp)`` between a forward and a backward pass."""
    cache = _forward(params, batch)
    loss, g = grad_fn(cache.logp)
    return loss, backward(params, batch, cache, g), cache.logp


def sft_loss_grad(
    params: PolicyParams, batch: ContextBatch, targets: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative log-likelihood of the target vocabulary indices."""
    targets = np.asarray(targets, dtype=np.int64)
    v = len(params.vocab)
    if targets.shape != (len(batch),):
        raise ValueError("one target per context is required")
    if np.any((targets < 0) | (targets >= v)):
        raise ValueError("target outside the vocabulary")
    rows = np.arange(len(batch))

    def nll(logp: np.ndarray) -> tuple[float, np.ndarray]:
        g = np.zeros_like(logp)
        g[rows, targets] = -1.0 / len(batch)
        return float(-logp[rows, targets].mean()), g

    loss, grads, _ = loss_and_grad(params, batch, nll)
    return loss, grads


# ---------------------------------------------------------------- checkpoints


def _header(params: PolicyParams, meta: dict | None) -> dict:
    return {
        "format": "recpo-policy",
        "version": CHECKPOINT_VERSION,
        "vocab_size": len(params.vocab),
        "dim": params.dim,
        "vocab": list(params.vocab),
        "meta": meta or {},
    }


def save_params(params: PolicyParams, path: str | Path, meta: dict | None = None) -> None:
    """Write a checkpoint; ``.json`` selects the text container, anything else the binary one."""
    path = Path(path)
    header = _header(params, meta)
    if path.suffix == ".json":
        doc = dict(header)
        doc["tensors"] = {
            "embeddings": params.embeddings.tolist(),
            "bias": params.bias.tolist(),
            "eta": params.eta,
            "score_gain": params.score_gain,
        }
        path.write_text(json.dumps(doc, sort_keys=True) + "\n")
        return
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(
        [
            np.ascontiguousarray(params.embeddings, dtype="<f8").tobytes(),
            np.ascontiguousarray(params.bias, dtype="<f8").tobytes(),
            struct.pack("<dd", params.eta, params.score_gain),
        ]
    )
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + body)


def load_params(path: str | Path) -> tuple[PolicyParams, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(CHECKPOINT_MAGIC):
        (hlen,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
        start = len(CHECKPOINT_MAGIC) + 4
        header = json.loads(raw[start : start + hlen])
        v, d = header["vocab_size"], header["dim"]
        offset = start + hlen
        emb = np.frombuffer(raw, dtype="<f8", count=v * d, offset=offset).reshape(v, d).copy()
        offset += 8 * v * d
        bias = np.frombuffer(raw, dtype="<f8", count=v, offset=offset).copy()
        offset += 8 * v
        eta, gain = struct.unpack_from("<dd", raw, offset)
    else:
        header = json.loads(raw)
        if header.get("format") != "recpo-policy":
            raise ValueError(f"{path} is not a policy checkpoint")
        t = header["tensors"]
        emb = np.array(t["embeddings"], dtype=float).reshape(header["vocab_size"], header["dim"])
        bias = np.array(t["bias"], dtype=float)
        eta, gain = t["eta"], t["score_gain"]
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    params = PolicyParams(tuple(header["vocab"]), emb, bias, float(eta), float(gain))
    return params, header.get("meta", {})


__all__ = [
    "ContextBatch",
    "PolicyParams",
    "backward",
    "encode_contexts",
    "forward_logprobs",
    "init_params",
    "load_params",
    "loss_and_grad",
    "save_params",
    "sft_loss_grad",
    "snapshot_reference",
    "visible_history",
]
