import math

import numpy as np
import pytest

from recpo_lab.config import HistoryMode, PolicyConfig
from recpo_lab.policy import (
    PolicyParams,
    encode_contexts,
    forward_logprobs,
    init_params,
    load_params,
    loss_and_grad,
    save_params,
    sft_loss_grad,
    snapshot_reference,
    visible_history,
)
from recpo_lab.train import grad_check

from conftest import seq


def random_params(rng, v=7, d=4, eta=0.8, gain=0.4):
    return PolicyParams(tuple(range(10, 10 + v)), rng.normal(size=(v, d)), rng.normal(size=v), eta, gain)


def random_batch(rng, params, n=5, length=6, include_scores=True):
    vocab = params.vocab
    ctx = []
    for u in range(n):
        items = rng.choice(vocab, size=length, replace=False)
        scores = rng.integers(1, 6, size=length)
        s = seq(u, list(zip(items.tolist(), scores.astype(float).tolist())))
        ctx.append((s, int(rng.integers(0, length))))
    return encode_contexts(ctx, params.index(), HistoryMode.FULL, include_scores)


def as_point(params):
    return {k: np.array(v, dtype=float) for k, v in params.tensors().items()}


def test_zero_embeddings_uniform():
    v = 9
    params = PolicyParams(tuple(range(v)), np.zeros((v, 3)), np.zeros(v), 0.9, 0.5)
    batch = encode_contexts([(seq(0, [(1, 4.0), (2, 2.0)]), 1)], params.index())
    assert np.allclose(forward_logprobs(params, batch), -math.log(v), atol=1e-15)


def test_hand_computed_three_items():
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    params = PolicyParams((0, 1, 2), emb, np.array([0.1, -0.2, 0.0]), 0.5, 0.5)
    s = seq(0, [(0, 5.0), (1, 1.0)])
    batch = encode_contexts([(s, 1)], params.index())
    # weights: item 0 at age 1 -> 0.5 * (1 + 0.5*2) = 1.0; item 1 at age 0 -> 1 * (1 + 0.5*-2) = 0
    c = np.array([1.0, 0.0])
    logits = np.array([c @ emb[i] for i in range(3)]) + params.bias
    expected = logits - math.log(sum(math.exp(x) for x in logits))
    assert np.allclose(forward_logprobs(params, batch)[0], expected, atol=1e-6)


def test_normalisation_fuzz():
    rng = np.random.default_rng(0)
    for _ in range(25):
        params = random_params(rng, v=int(rng.integers(3, 15)), d=int(rng.integers(2, 6)))
        table = forward_logprobs(params, random_batch(rng, params, n=40, length=3))
        assert np.all(np.isfinite(table))
        assert np.allclose(np.exp(table).sum(axis=1), 1.0, atol=1e-9)


def test_uniform_sft_loss_is_log_v():
    v = 20
    params = PolicyParams(tuple(range(v)), np.zeros((v, 4)), np.zeros(v), 0.9, 0.5)
    batch = encode_contexts([(seq(0, [(3, 4.0), (5, 1.0)]), 1)], params.index())
    loss, _ = sft_loss_grad(params, batch, np.array([7]))
    assert loss == pytest.approx(math.log(20), abs=1e-12)


def test_peaked_policy_sft_loss_near_zero():
    v = 5
    emb = np.eye(v, 3) * 0.0
    bias = np.full(v, -40.0)
    bias[2] = 40.0
    params = PolicyParams(tuple(range(v)), emb, bias, 0.9, 0.5)
    batch = encode_contexts([(seq(0, [(0, 4.0)]), 0)], params.index())
    assert sft_loss_grad(params, batch, np.array([2]))[0] < 1e-30


def test_sft_rejects_unknown_target():
    params = random_params(np.random.default_rng(1))
    batch = encode_contexts([(seq(0, [(10, 4.0)]), 0)], params.index())
    with pytest.raises(ValueError):
        sft_loss_grad(params, batch, np.array([99]))


@pytest.mark.parametrize("include_scores", [True, False])
def test_sft_grad_check(include_scores):
    rng = np.random.default_rng(2)
    for _ in range(20):
        params = random_params(rng)
        batch = random_batch(rng, params, include_scores=include_scores)
        targets = rng.integers(0, len(params.vocab), size=len(batch))

        def fun(point):
            p = params.with_tensors(point)
            return sft_loss_grad(p, batch, targets)

        assert grad_check(fun, as_point(params)) < 1e-4


@pytest.mark.parametrize("block", ["embeddings", "bias", "eta", "score_gain"])
def test_each_block_independently(block):
    rng = np.random.default_rng(3)
    params = random_params(rng)
    batch = random_batch(rng, params)
    targets = rng.integers(0, len(params.vocab), size=len(batch))
    others = {k: v for k, v in as_point(params).items() if k != block}

    def fun(point):
        p = params.with_tensors({**others, **point})
        loss, grads = sft_loss_grad(p, batch, targets)
        return loss, {block: grads[block]}

    assert grad_check(fun, {block: as_point(params)[block]}) < 1e-4


def test_permutation_invariance_without_decay_or_gain():
    rng = np.random.default_rng(4)
    params = random_params(rng, eta=1.0, gain=0.0)
    rows = [(10, 5.0), (11, 1.0), (12, 3.0), (13, 4.0)]
    a = encode_contexts([(seq(0, rows), 3)], params.index())
    b = encode_contexts([(seq(0, rows[::-1]), 3)], params.index())
    assert np.allclose(forward_logprobs(params, a), forward_logprobs(params, b), atol=1e-12)


def test_filtered_history_keeps_high_scores_only():
    s = seq(0, [(1, 5.0), (2, 2.0), (3, 4.0), (4, 3.0)])
    assert [x.item_id for x in visible_history(s.prefix(3), HistoryMode.FILTERED)] == [1, 3]
    assert [x.item_id for x in visible_history(s.prefix(3), HistoryMode.FULL, max_history=2)] == [3, 4]


def test_hidden_scores_zero_the_centered_channel():
    s = seq(0, [(1, 5.0), (2, 1.0)])
    batch = encode_contexts([(s, 1)], {1: 0, 2: 1}, include_scores=False)
    assert np.all(batch.centered == 0)
    assert list(batch.age[0]) == [1.0, 0.0]


def test_snapshot_is_frozen_and_idempotent():
    rng = np.random.default_rng(5)
    params = random_params(rng)
    ref = snapshot_reference(params)
    batch = random_batch(rng, params)
    before = forward_logprobs(ref, batch)
    with pytest.raises(ValueError):
        ref.embeddings[0, 0] = 1.0
    loss, grads = sft_loss_grad(params, batch, np.zeros(len(batch), dtype=int))
    params.embeddings[:] -= 0.1 * grads["embeddings"]  # training mutates only the live copy
    assert np.array_equal(forward_logprobs(ref, batch), before)
    assert np.array_equal(forward_logprobs(snapshot_reference(ref), batch), before)


def test_init_params_seeded_and_bounded():
    a = init_params([5, 3, 9], PolicyConfig(dim=6), seed=1)
    b = init_params([9, 5, 3], PolicyConfig(dim=6), seed=1)
    assert a.vocab == (3, 5, 9)
    assert np.array_equal(a.embeddings, b.embeddings)
    assert np.abs(a.embeddings).max() <= 0.1
    assert np.all(a.bias == 0) and a.eta == 0.9 and a.score_gain == 0.5


def test_eta_clipped_on_update():
    params = random_params(np.random.default_rng(6))
    t = params.tensors()
    assert params.with_tensors({**t, "eta": np.array(1.7)}).eta == 1.0
    assert params.with_tensors({**t, "eta": np.array(-3.0)}).eta == 1e-3


def test_binary_checkpoint_round_trip(tmp_path):
    params = random_params(np.random.default_rng(7))
    save_params(params, tmp_path / "a.ckpt", {"note": "x"})
    loaded, meta = load_params(tmp_path / "a.ckpt")
    save_params(loaded, tmp_path / "b.ckpt", meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert meta == {"note": "x"}
    assert np.array_equal(loaded.embeddings, params.embeddings)


def test_json_checkpoint_round_trip(tmp_path):
    params = random_params(np.random.default_rng(8))
    save_params(params, tmp_path / "a.json")
    loaded, _ = load_params(tmp_path / "a.json")
    assert np.allclose(loaded.embeddings, params.embeddings, atol=1e-12, rtol=0)
    assert loaded.eta == params.eta and loaded.vocab == params.vocab


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_params(tmp_path / "x.json")


def test_loss_and_grad_passes_custom_objective():
    rng = np.random.default_rng(9)
    params = random_params(rng)
    batch = random_batch(rng, params, n=2)
    loss, grads, logp = loss_and_grad(params, batch, lambda lp: (float(lp[:, 0].sum()), np.eye(1, lp.shape[1]).repeat(2, 0)))
    assert loss == pytest.approx(logp[:, 0].sum())
    assert set(grads) == {"embeddings", "bias", "eta", "score_gain"}
