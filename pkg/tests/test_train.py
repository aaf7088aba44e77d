import math
from dataclasses import replace

import numpy as np
import pytest

from groupbert_kit import tensor as T
from groupbert_kit import train as train_mod
from groupbert_kit.data import CLS, MASK, PAD, SEP, Batch, PretrainingData, synthetic_corpus
from groupbert_kit.model import ModelConfig, build_model, encoder_forward, mlm_logits
from groupbert_kit.tensor import Tensor
from groupbert_kit.train import (DivergenceError, MaskingConfig, NonFiniteGradientError, OptimizerConfig,
                                 TrainState, adamw_step, compute_gradients, evaluate_mlm, lr_schedule,
                                 mask_batch, mask_mlm, train_loop)

V = 101
TOY = ModelConfig(family="groupbert", layers=2, hidden=32, heads=2, ffn_groups=2, conv_group_size=8,
                  vocab_size=V, max_positions=32)


# ---------------------------------------------------------------------------
# masking


def test_zero_mask_prob_changes_nothing():
    toks = np.arange(5, 25)
    out, pos, lab = mask_mlm(toks, MaskingConfig(mask_prob=0.0), np.random.default_rng(0), V)
    assert np.array_equal(out, toks) and pos.size == 0 and lab.size == 0


def test_full_mask_prob_masks_every_maskable_position():
    toks = np.array([CLS, 7, 8, 9, SEP, 10, SEP, PAD])
    cfg = MaskingConfig(mask_prob=1.0, replace_mask=1.0, replace_random=0.0, keep=0.0)
    out, pos, lab = mask_mlm(toks, cfg, np.random.default_rng(0), V)
    assert out.tolist() == [CLS, MASK, MASK, MASK, SEP, MASK, SEP, PAD]
    assert lab.tolist() == [7, 8, 9, 10]


def test_masking_rates_monte_carlo():
    toks = np.arange(10_000) % (V - 5) + 5
    out, pos, lab = mask_mlm(toks, MaskingConfig(), np.random.default_rng(123), V)
    frac = pos.size / toks.size
    assert abs(frac - 0.15) <= 0.01
    n = pos.size
    masked = np.count_nonzero(out[pos] == MASK) / n
    unchanged = np.count_nonzero(out[pos] == lab) / n
    randomised = 1 - masked - unchanged
    # random replacements that happen to hit the original id count as unchanged
    assert abs(masked - 0.8) <= 0.02
    assert abs(randomised - 0.1 * (1 - 1 / (V - 5))) <= 0.02
    assert abs(unchanged - 0.1) <= 0.02


def test_masking_is_keyed_by_sequence_index():
    data = synthetic_corpus(8, 16, V, seed=0)
    cfg = MaskingConfig(seed=4)
    whole = mask_batch(data.batch(np.arange(8)), cfg, V)
    part = mask_batch(data.batch(np.array([5])), cfg, V)
    assert np.array_equal(whole.tokens[5], part.tokens[0])
    other = mask_batch(data.batch(np.arange(8)), replace(cfg, seed=5), V)
    assert not np.array_equal(whole.tokens, other.tokens)


def test_unmaskable_sequences_are_counted():
    toks = np.array([[CLS, SEP, SEP, PAD], [CLS, 9, SEP, PAD]])
    batch = Batch(toks, np.zeros_like(toks), toks != PAD, np.zeros(2, int), np.arange(2))
    masked = mask_batch(batch, MaskingConfig(mask_prob=1.0), V)
    assert masked.skipped == 1
    assert masked.positions.tolist() == [4 + 1]


# ---------------------------------------------------------------------------
# schedule and optimiser


def test_lr_schedule_examples():
    cfg = OptimizerConfig(peak_lr=1e-3, total_steps=800_000)
    assert cfg.warmup == 10_000
    assert lr_schedule(5_000, cfg) == pytest.approx(0.5e-3)
    assert lr_schedule(10_000, cfg) == 1e-3
    assert lr_schedule(800_000, cfg) == 0.0
    assert OptimizerConfig(total_steps=500).warmup == 50


def test_lr_schedule_is_continuous_with_peak_max():
    cfg = OptimizerConfig(peak_lr=2.0, total_steps=300)
    lrs = np.array([lr_schedule(s, cfg) for s in range(301)])
    assert lrs.max() == 2.0
    assert np.max(np.abs(np.diff(lrs))) <= 2.0 / cfg.warmup + 1e-12
    with pytest.raises(ValueError):
        lr_schedule(301, cfg)


def one_param(value, grad):
    return {"w": Tensor(np.array(value, dtype=float))}, {"w": np.array(grad, dtype=float)}


def test_first_step_with_bias_correction_is_sign_step():
    params, grads = one_param([1.0, 1.0], [0.3, -20.0])
    cfg = OptimizerConfig(bias_correction=True, weight_decay=0.0)
    adamw_step(params, grads, TrainState(), cfg, lr=0.01)
    np.testing.assert_allclose(params["w"].data - 1.0, [-0.01, 0.01], rtol=1e-4)


def test_first_step_without_bias_correction_overshoots():
    params, grads = one_param([0.0], [5.0])
    cfg = OptimizerConfig(bias_correction=False, weight_decay=0.0)
    adamw_step(params, grads, TrainState(), cfg, lr=0.01)
    expected = -0.01 * 0.1 * 5.0 / (math.sqrt(0.001) * 5.0 + 1e-6)
    assert params["w"].data[0] == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(-3.162 * 0.01, rel=1e-3)


def test_weight_decay_is_decoupled():
    params, grads = one_param([2.0], [0.0])
    params["b.bias"] = Tensor(np.array([2.0]))
    grads["b.bias"] = np.array([0.0])
    adamw_step(params, grads, TrainState(), OptimizerConfig(weight_decay=0.1), lr=0.5)
    assert params["w"].data[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)
    assert params["b.bias"].data[0] == 2.0


def test_zero_lr_is_identity_but_moments_advance():
    params, grads = one_param([1.0, -2.0], [0.5, 0.5])
    state = adamw_step(params, grads, TrainState(), OptimizerConfig(), lr=0.0)
    assert params["w"].data.tolist() == [1.0, -2.0]
    assert state.step == 1 and np.all(state.m["w"] != 0) and state.m["w"].shape == (2,)


def test_non_finite_gradient_aborts_with_step():
    params, grads = one_param([1.0], [np.nan])
    with pytest.raises(NonFiniteGradientError, match="step 1"):
        adamw_step(params, grads, TrainState(), OptimizerConfig(), lr=0.1)


def test_quadratic_bowl_converges():
    target = 3.0
    w = Tensor(np.array([-2.0]), requires_grad=True)
    cfg = OptimizerConfig(peak_lr=0.5, total_steps=200, weight_decay=0.0, bias_correction=True)
    state = TrainState()
    for step in range(200):
        w.grad = None
        diff = T.sub(w, Tensor(np.array([target])))
        T.backward(T.scale(T.sum(T.mul(diff, diff)), 0.5))
        adamw_step({"w": w}, {"w": w.grad}, state, cfg, lr_schedule(step, cfg))
    assert abs(w.data[0] - target) < 1e-3


# ---------------------------------------------------------------------------
# losses and loop


@pytest.fixture(scope="module")
def corpus():
    return synthetic_corpus(64, 16, V, seed=0), synthetic_corpus(32, 16, V, seed=1)


def test_untrained_model_loss_near_log_vocab(corpus):
    _, held = corpus
    model = build_model(TOY, seed=0)
    assert abs(evaluate_mlm(model, held) - math.log(V)) < 0.1


def test_uniform_logits_give_log_vocab(corpus):
    _, held = corpus
    model = build_model(TOY, seed=0)
    model.params["embeddings.token"].data[:] = 0
    assert abs(evaluate_mlm(model, held) - math.log(V)) < 0.05


def test_evaluation_ignores_dropout(corpus):
    _, held = corpus
    a = evaluate_mlm(build_model(TOY, seed=3), held)
    b = evaluate_mlm(build_model(TOY.replace(dropout_rate=0.5), seed=3), held)
    assert a == b


def test_evaluate_rejects_empty(corpus):
    with pytest.raises(ValueError):
        evaluate_mlm(build_model(TOY), corpus[0].subset(0, 0))


def test_unmasked_logits_get_no_gradient(corpus):
    data, _ = corpus
    model = build_model(TOY, seed=1)
    batch = data.batch(np.arange(4))
    masked = mask_batch(batch, MaskingConfig(seed=2), V)
    hidden = encoder_forward(model, masked.tokens, batch.segments, batch.mask).hidden
    logits = mlm_logits(hidden, model)
    flat = T.reshape(logits, (4 * 16, V))
    T.backward(T.cross_entropy(T.getitem(flat, masked.positions), masked.labels))
    grad = logits.grad.reshape(4 * 16, V)
    unmasked = np.setdiff1d(np.arange(4 * 16), masked.positions)
    assert np.all(grad[unmasked] == 0)
    assert np.any(grad[masked.positions] != 0)


def test_sharded_gradients_match_single_worker(corpus):
    data, _ = corpus
    model = build_model(TOY, seed=2)
    batch = data.batch(np.arange(8))
    masked = mask_batch(batch, MaskingConfig(), V)
    kw = dict(nsp=True, training=False, dropout_rate=0.0, seed=0, step=0)
    one = compute_gradients(model, batch, masked, workers=1, **kw)
    three_a = compute_gradients(model, batch, masked, workers=3, **kw)
    three_b = compute_gradients(model, batch, masked, workers=3, **kw)
    for k in one[0]:
        np.testing.assert_allclose(three_a[0][k], one[0][k], rtol=1e-10, atol=1e-13)
        assert np.array_equal(three_a[0][k], three_b[0][k])
    assert three_a[1] == pytest.approx(one[1], rel=1e-12)


def test_thread_env_var(monkeypatch):
    monkeypatch.setenv(train_mod.THREADS_ENV, "3")
    assert train_mod._worker_count(None) == 3
    monkeypatch.setenv(train_mod.THREADS_ENV, "many")
    with pytest.raises(ValueError):
        train_mod._worker_count(None)


def test_training_is_deterministic_and_writes_metrics(corpus, tmp_path):
    data, _ = corpus

    def run(path):
        model = build_model(TOY, seed=0)
        return train_loop(model, data, OptimizerConfig(peak_lr=3e-3, total_steps=12), batch_size=8, seed=0,
                          metrics_path=path)

    a, b = run(tmp_path / "a.csv"), run(tmp_path / "b.csv")
    assert a.losses == b.losses
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "step,lr,loss,mlm_loss,nsp_loss"
    assert not list(tmp_path.glob("*.partial"))


def test_pretrain_runs_without_dropout_and_finetune_enables_it(corpus, monkeypatch):
    data, _ = corpus
    cfg = TOY.replace(dropout_rate=0.3)
    seen = []
    real = train_mod.adamw_step

    def spy(params, grads, state, config, lr):
        seen.append(config.bias_correction)
        return real(params, grads, state, config, lr)

    monkeypatch.setattr(train_mod, "adamw_step", spy)
    opt = OptimizerConfig(total_steps=3)
    pre = train_loop(build_model(cfg, seed=0), data, opt, mode="pretrain", batch_size=4)
    plain = train_loop(build_model(TOY, seed=0), data, opt, mode="pretrain", batch_size=4)
    fine = train_loop(build_model(cfg, seed=0), data, opt, mode="finetune", batch_size=4)
    assert pre.losses == plain.losses
    assert fine.losses[0] != pre.losses[0]
    assert seen == [False] * 6 + [True] * 3


def test_divergence_detector(corpus):
    data, _ = corpus
    with pytest.raises(DivergenceError) as info:
        train_loop(build_model(TOY), data, OptimizerConfig(total_steps=20), batch_size=4,
                   divergence_factor=0.5, divergence_patience=3)
    assert info.value.step == 2


def test_checkpoints_written_at_interval(corpus, tmp_path):
    data, _ = corpus
    train_loop(build_model(TOY), data, OptimizerConfig(total_steps=4), batch_size=4,
               checkpoint_dir=tmp_path, checkpoint_every=2)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step000002.ckpt", "step000004.ckpt"]


def test_memorises_a_repeated_sequence():
    cfg = ModelConfig(family="groupbert", layers=1, hidden=32, heads=2, ffn_groups=2, conv_group_size=8,
                      vocab_size=30, max_positions=16)
    seq = np.array([CLS, 9, 14, 22, 7, 11, SEP, 25, 6, 17, 13, SEP])
    toks = np.tile(seq, (16, 1))
    data = PretrainingData(toks, np.zeros_like(toks), toks != PAD, np.zeros(16, dtype=np.int64), 30)
    result = train_loop(build_model(cfg, seed=0), data, OptimizerConfig(peak_lr=3e-3, total_steps=300, weight_decay=0.0),
                        batch_size=16, nsp=False)
    # masks are keyed by sequence index, so the same 16 masked copies recur every step
    assert result.losses[-1] < 0.1
