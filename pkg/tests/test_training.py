"""nDCG oracles, LambdaRank loss, AdamW, and the training loop contract."""

import numpy as np
import pytest

from stablerank import autodiff as ad
from stablerank.data import GenConfig, generate_synthetic, tokenize_dataset
from stablerank.errors import ConfigError, ContractError, TrainingDivergedError
from stablerank.layout import InvarianceMode
from stablerank.model import ModelConfig, init_params
from stablerank.training import (
    AdamW,
    TrainConfig,
    dcg,
    delta_ndcg,
    lambdarank_loss,
    ndcg_at_k,
    train,
    validation_ndcg,
    warmup_lr,
)

LOG2_3 = np.log2(3.0)


# -- ndcg ---------------------------------------------------------------------


def test_ndcg_worked_values():
    assert ndcg_at_k([0.9, 0.1, 0.2, 0.3, 0.05], [1, 0, 0, 0, 0], 5) == 1.0
    # ranked labels [0,1,0,0,0]: positive at rank 2
    val = ndcg_at_k([0.9, 0.8, 0.1, 0.05, 0.01], [0, 1, 0, 0, 0], 5)
    assert abs(val - 1.0 / LOG2_3) < 1e-12
    assert abs(val - 0.6309297535714575) < 1e-12
    assert ndcg_at_k([0.5, 0.4], [0, 0], 5) == 0.0


def test_ndcg_truncation_and_grading():
    # positive outside top-k contributes nothing
    scores = -np.arange(6, dtype=np.float64)
    labels = [0, 0, 0, 0, 0, 1]
    assert ndcg_at_k(scores, labels, 5) == 0.0
    assert ndcg_at_k(scores, labels, 6) > 0.0
    # graded gains: higher label first is strictly better
    better = ndcg_at_k([0.9, 0.8], [2, 1], 2)
    worse = ndcg_at_k([0.8, 0.9], [2, 1], 2)
    assert better == 1.0 and worse < 1.0


def test_dcg_contract():
    with pytest.raises(ContractError):
        dcg([1.0], 0)
    with pytest.raises(ContractError):
        ndcg_at_k([0.1], [-1], 1)
    assert dcg([1, 1, 1], 2) == 1.0 + 1.0 / LOG2_3


# -- delta ndcg -----------------------------------------------------------------


def test_delta_ndcg_worked_value():
    val = delta_ndcg([0.2, 0.9], [1, 0], 0, 1)
    assert abs(val - 0.36907) < 1e-5
    assert abs(val - (1.0 - 1.0 / LOG2_3)) < 1e-12


def test_delta_ndcg_equal_labels_zero():
    assert delta_ndcg([0.5, 0.1], [1, 1], 0, 1) == 0.0


def test_delta_ndcg_symmetric_and_validated():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 8))
        s = rng.normal(size=n)
        y = rng.integers(0, 3, size=n)
        i, j = rng.choice(n, size=2, replace=False)
        assert delta_ndcg(s, y, int(i), int(j)) == delta_ndcg(s, y, int(j), int(i))
    with pytest.raises(ContractError):
        delta_ndcg([0.1, 0.2], [1, 0], 1, 1)


def test_pair_weights_match_delta_ndcg():
    from stablerank.training import _pair_weights

    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        s = rng.normal(size=n)
        y = rng.integers(0, 3, size=n)
        I, J, w = _pair_weights(s, y)
        if w is None:
            assert not (y[:, None] > y[None, :]).any()
            continue
        for i, j, wij in zip(I, J, w):
            assert abs(wij - delta_ndcg(s, y, int(i), int(j))) < 1e-12


# -- lambdarank loss -------------------------------------------------------------


def test_lambdarank_worked_value():
    loss = lambdarank_loss([0.2, 0.9], [1, 0], sigma=1.0)
    assert abs(loss.item() - 0.40718) < 1e-4
    expected = (1.0 - 1.0 / LOG2_3) * np.log1p(np.exp(0.7))
    assert abs(loss.item() - expected) < 1e-12


def test_lambdarank_zero_margin_gives_w_log2():
    loss = lambdarank_loss([0.5, 0.5], [1, 0], sigma=1.0)
    w = 1.0 - 1.0 / LOG2_3
    assert abs(loss.item() - w * np.log(2.0)) < 1e-12


def test_lambdarank_satisfied_pair_vanishes():
    loss = lambdarank_loss([50.0, 0.0], [1, 0], sigma=1.0)
    assert loss.item() < 1e-10


def test_lambdarank_no_pairs_returns_none():
    assert lambdarank_loss([0.1, 0.2], [1, 1]) is None
    assert lambdarank_loss([0.1, 0.2, 0.3], [0, 0, 0]) is None


def test_lambdarank_sigma_validation():
    with pytest.raises(ConfigError):
        lambdarank_loss([0.1, 0.2], [1, 0], sigma=0.0)


def test_lambdarank_relabel_invariance():
    rng = np.random.default_rng(5)
    s = rng.normal(size=7)
    y = rng.integers(0, 3, size=7)
    base = lambdarank_loss(s, y).item()
    for _ in range(5):
        pi = rng.permutation(7)
        assert abs(lambdarank_loss(s[pi], y[pi]).item() - base) < 1e-12


def test_lambdarank_gradient_matches_frozen_weight_fd():
    from stablerank.training import _pair_weights

    rng = np.random.default_rng(7)
    s0 = rng.normal(size=6)
    y = np.array([2, 0, 1, 0, 1, 0])
    scores = ad.Tensor(s0.copy(), requires_grad=True)
    with ad.Tape():
        loss = lambdarank_loss(scores, y, sigma=1.3)
        ad.backward(loss)
    grad = scores.grad.copy()

    I, J, w = _pair_weights(s0, y)

    def frozen(vals):
        m = vals[I] - vals[J]
        return float(np.mean(w * np.log1p(np.exp(-1.3 * m))))

    eps = 1e-7
    for idx in range(6):
        bumped = s0.copy()
        bumped[idx] += eps
        up = frozen(bumped)
        bumped[idx] -= 2 * eps
        down = frozen(bumped)
        fd = (up - down) / (2 * eps)
        assert abs(fd - grad[idx]) < 1e-6


# -- optimizer / schedule ----------------------------------------------------------


def test_warmup_schedule():
    assert warmup_lr(1e-3, 0, 500, 0.05) == pytest.approx(1e-3 / 25)
    assert warmup_lr(1e-3, 24, 500, 0.05) == pytest.approx(1e-3)
    assert warmup_lr(1e-3, 400, 500, 0.05) == 1e-3
    assert warmup_lr(1e-3, 0, 500, 0.0) == 1e-3


def tiny_model(vocab_size, seed=0):
    return init_params(
        ModelConfig(
            vocab_size=vocab_size, d_model=16, n_heads=2, n_layers=1, d_ff=32, max_seq_len=64, seed=seed
        )
    )


def test_adamw_zero_grad_noop():
    params = tiny_model(50)
    before = {n: t.data.copy() for n, t in params.items()}
    opt = AdamW(params)
    params.zero_grads()
    opt.apply(step=0, lr=1e-2, weight_decay=0.0)
    for n, t in params.items():
        np.testing.assert_array_equal(t.data, before[n])


def test_adamw_rejects_nonfinite_grads():
    params = tiny_model(50)
    opt = AdamW(params)
    params["lm_head"].grad = np.full_like(params["lm_head"].data, np.nan)
    with pytest.raises(TrainingDivergedError):
        opt.apply(step=0, lr=1e-3)


def test_adamw_clip_bounds_update_norm():
    params = tiny_model(50)
    opt = AdamW(params)
    for t in params.values():
        t.grad = np.full_like(t.data, 100.0)
    before = {n: t.data.copy() for n, t in params.items()}
    opt.apply(step=0, lr=1.0, clip_norm=1e-6)
    # clipped gradient is minuscule, but Adam normalizes by sqrt(v): the
    # update magnitude is lr * g/(sqrt(g^2)) ~= lr regardless; what clipping
    # must guarantee is determinism and finiteness, checked here, plus the
    # exact scale factor below.
    total = np.sqrt(sum(np.sum((t.data - before[n]) ** 2) for n, t in params.items()))
    assert np.isfinite(total)


def test_adamw_clip_scales_gradients_exactly():
    params = tiny_model(50)
    opt_a, opt_b = AdamW(params), None
    grads = {n: np.random.default_rng(1).normal(size=t.shape) for n, t in params.items()}
    total = np.sqrt(sum(np.sum(g * g) for g in grads.values()))
    clip = float(total / 2)

    snapshot = {n: t.data.copy() for n, t in params.items()}
    for n, t in params.items():
        t.grad = grads[n].copy()
    opt_a.apply(0, lr=1e-3, clip_norm=clip)
    after_clipped = {n: t.data.copy() for n, t in params.items()}

    for n, t in params.items():
        t.data = snapshot[n].copy()
        t.grad = grads[n] * 0.5  # pre-scaled by the same factor
    opt_b = AdamW(params)
    opt_b.apply(0, lr=1e-3, clip_norm=None)
    for n, t in params.items():
        np.testing.assert_allclose(t.data, after_clipped[n], atol=1e-15)


# -- train loop ---------------------------------------------------------------


GEN = GenConfig(n_users=10, n_items=120, K=6, history_len=4, positives_per_list=2, seed=3)


@pytest.fixture(scope="module")
def tiny_data():
    train_ds, val_ds, _ = generate_synthetic(GEN)
    return tokenize_dataset(train_ds), tokenize_dataset(val_ds), train_ds.vocab.size


def test_train_smoke_and_log_shape(tiny_data):
    tqs, val, vocab = tiny_data
    params = tiny_model(vocab)
    cfg = TrainConfig(steps=4, batch_size=2, learning_rate=1e-3, seed=0, eval_every=2)
    opt, log = train(params, tqs, cfg, val_queries=val)
    assert len(log.entries) == 4
    for e in log.entries:
        assert e["loss"] is not None and np.isfinite(e["loss"])
        assert e["examples_used"] == 2
    assert "val_ndcg10" in log.entries[1] and "val_ndcg10" in log.entries[3]
    assert "val_ndcg10" not in log.entries[0]
    assert log.wall_clock_seconds > 0


def test_train_zero_steps_noop(tiny_data):
    tqs, _, vocab = tiny_data
    params = tiny_model(vocab)
    before = {n: t.data.copy() for n, t in params.items()}
    _, log = train(params, tqs, TrainConfig(steps=0, batch_size=2))
    assert log.entries == []
    for n, t in params.items():
        np.testing.assert_array_equal(t.data, before[n])


def test_train_deterministic(tiny_data):
    tqs, _, vocab = tiny_data
    cfg = TrainConfig(steps=3, batch_size=2, seed=9, eval_every=0)
    pa = tiny_model(vocab, seed=1)
    pb = tiny_model(vocab, seed=1)
    _, log_a = train(pa, tqs, cfg)
    _, log_b = train(pb, tqs, cfg)
    for (na, ta), (nb, tb) in zip(pa.items(), pb.items()):
        np.testing.assert_array_equal(ta.data, tb.data)
    assert [e["loss"] for e in log_a.entries] == [e["loss"] for e in log_b.entries]


def test_train_resume_matches_uninterrupted(tiny_data):
    tqs, _, vocab = tiny_data
    cfg = TrainConfig(steps=6, batch_size=2, seed=4, eval_every=0)

    full = tiny_model(vocab, seed=2)
    train(full, tqs, cfg)

    resumed = tiny_model(vocab, seed=2)
    opt, _ = train(resumed, tqs, TrainConfig(steps=3, batch_size=2, seed=4, eval_every=0))
    # same config, picking up at step 3 with the optimizer moments carried over
    train(resumed, tqs, cfg, start_step=3, optimizer=opt)

    for (nf, tf), (nr, tr) in zip(full.items(), resumed.items()):
        np.testing.assert_array_equal(tf.data, tr.data)


def test_train_full_mode_invariant_to_presentation_order(tiny_data):
    tqs, _, vocab = tiny_data
    base_cfg = TrainConfig(steps=3, batch_size=2, seed=5, eval_every=0, mode=InvarianceMode.FULL)
    shuf_cfg = TrainConfig(
        steps=3, batch_size=2, seed=5, eval_every=0, mode=InvarianceMode.FULL, order_seed=777
    )
    pa = tiny_model(vocab, seed=3)
    pb = tiny_model(vocab, seed=3)
    _, log_a = train(pa, tqs, base_cfg)
    _, log_b = train(pb, tqs, shuf_cfg)
    for ea, eb in zip(log_a.entries, log_b.entries):
        assert abs(ea["loss"] - eb["loss"]) < 1e-8
    for ta, tb in zip(pa.values(), pb.values()):
        np.testing.assert_allclose(ta.data, tb.data, atol=1e-8)


def test_train_standard_mode_sensitive_to_presentation_order(tiny_data):
    tqs, _, vocab = tiny_data
    base_cfg = TrainConfig(steps=3, batch_size=2, seed=5, eval_every=0, mode=InvarianceMode.STANDARD)
    shuf_cfg = TrainConfig(
        steps=3, batch_size=2, seed=5, eval_every=0, mode=InvarianceMode.STANDARD, order_seed=777
    )
    pa = tiny_model(vocab, seed=3)
    pb = tiny_model(vocab, seed=3)
    _, log_a = train(pa, tqs, base_cfg)
    _, log_b = train(pb, tqs, shuf_cfg)
    assert any(abs(ea["loss"] - eb["loss"]) > 1e-8 for ea, eb in zip(log_a.entries, log_b.entries))


def test_train_skips_pairless_examples(tiny_data):
    from stablerank.data import TokenizedQuery

    _, _, vocab = tiny_data
    params = tiny_model(vocab)
    flat = TokenizedQuery(
        query_id=0,
        instruction=[6],
        history=[7, 8],
        candidates=[[9], [10]],
        labels=np.array([1, 1]),
    )
    before = {n: t.data.copy() for n, t in params.items()}
    _, log = train(params, [flat], TrainConfig(steps=2, batch_size=2, eval_every=0))
    assert log.skipped_examples == 4
    assert all(e["loss"] is None for e in log.entries)
    for n, t in params.items():
        np.testing.assert_array_equal(t.data, before[n])


def test_train_checkpoint_callback(tiny_data):
    tqs, _, vocab = tiny_data
    params = tiny_model(vocab)
    seen = []
    train(
        params,
        tqs,
        TrainConfig(steps=4, batch_size=1, eval_every=0),
        checkpoint_fn=lambda step, p, o: seen.append(step),
        checkpoint_every=2,
    )
    assert seen == [2, 4]


def test_train_log_write_deterministic(tmp_path, tiny_data):
    tqs, _, vocab = tiny_data
    cfg = TrainConfig(steps=2, batch_size=2, seed=1, eval_every=0)
    _, log = train(tiny_model(vocab, seed=4), tqs, cfg)
    p1, p2 = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    log.write(p1)
    log.write(p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    assert b"wall" not in open(p1, "rb").read()  # timing never serialized


def test_validation_ndcg_bounds(tiny_data):
    tqs, val, vocab = tiny_data
    v = validation_ndcg(tiny_model(vocab), val, InvarianceMode.FULL)
    assert 0.0 <= v <= 1.0


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=-1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(sigma=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(grad_clip_norm=0.0)
    cfg = TrainConfig(mode="attn")
    assert cfg.mode is InvarianceMode.ATTN_ONLY
