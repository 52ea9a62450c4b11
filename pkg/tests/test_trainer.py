import math

import numpy as np
import pytest

from conftest import tiny_config
from earn.errors import ConfigError, ContractError
from earn.model import RegisterSpec, init_weights
from earn.trainer import (AdamState, TrainConfig, TrainExample, adamw_step, backward, cosine_lr,
                          finite_difference_grads, loss_nll, make_batch, train)


def examples(rng, n, vocab, prompt_len=5, target_len=4):
    return [TrainExample(tuple(rng.integers(1, vocab, prompt_len).tolist()),
                         tuple(rng.integers(1, vocab, target_len).tolist()), i) for i in range(n)]


@pytest.fixture
def setup():
    cfg = tiny_config(num_layers=2, num_heads=2, num_kv_heads=1, head_dim=8, hidden_dim=16, ffn_dim=24,
                      vocab_size=16)
    spec = RegisterSpec(1, 1, 1)
    return cfg, spec, init_weights(cfg, spec, seed=2)


def test_batch_layout(setup, rng):
    cfg, spec, _ = setup
    b = make_batch(examples(rng, 3, 16), spec, 16)
    assert b.tokens.shape == (3, 1 + 5 + 1 + 3)
    assert b.roles.tolist() == [0, 1, 1, 1, 1, 1, 2, 3, 3, 3]
    assert b.tokens[0, 0] == 16 and b.tokens[0, 6] == 17
    with pytest.raises(ContractError):
        make_batch(examples(rng, 1, 16) + examples(rng, 1, 16, prompt_len=3), spec, 16)


@pytest.mark.parametrize("J", [1, 4])
def test_uniform_logits_loss(setup, rng, J):
    cfg, spec, w = setup
    w["head"] = np.zeros_like(w["head"])
    b = make_batch(examples(rng, 2, 16, target_len=J), spec, 16)
    assert loss_nll(w, cfg, spec, b) == pytest.approx(J * math.log(16), rel=1e-6)


def test_full_depth_loss_equals_vanilla(setup, rng):
    cfg, _, w = setup
    spec = RegisterSpec(1, 1, cfg.num_layers)
    b = make_batch(examples(rng, 3, 16), spec, 16)
    assert loss_nll(w, cfg, spec, b, "earn") == loss_nll(w, cfg, spec, b, "vanilla")


def test_pruned_loss_matches_masked_path(setup, rng):
    cfg, spec, w = setup
    b = make_batch(examples(rng, 3, 16), spec, 16)
    w64 = w.astype(np.float64)
    assert loss_nll(w64, cfg, spec, b, path="pruned") == pytest.approx(
        loss_nll(w64, cfg, spec, b, path="oracle"), rel=1e-12)


def test_unused_embedding_rows_get_zero_grad(setup):
    cfg, spec, w = setup
    ex = [TrainExample((1, 2, 3), (4, 5, 6, 7))]
    _, g = backward(w, cfg, spec, make_batch(ex, spec, 16))
    unused = [t for t in range(16) if t not in (1, 2, 3, 4, 5, 6)]
    assert np.all(g["tok_emb"][unused] == 0)
    assert np.any(g["tok_emb"][1] != 0)


def test_fully_masked_targets_give_zero_grads(setup, rng):
    cfg, spec, w = setup
    b = make_batch(examples(rng, 2, 16), spec, 16, loss_mask=np.zeros((2, 4)))
    loss, g = backward(w, cfg, spec, b)
    assert loss == 0.0
    assert all(np.all(v == 0) for v in g.values())


@pytest.mark.parametrize("mode", ["earn", "vanilla"])
def test_gradients_match_finite_differences(setup, rng, mode):
    cfg, spec, w = setup
    w64 = w.astype(np.float64)
    b = make_batch(examples(rng, 2, 16, prompt_len=3, target_len=2), spec, 16)
    names = ["prefix_reg", "suffix_reg", "layers.0.wk", "layers.1.wq", "layers.1.ffn_norm", "final_norm"]
    _, g = backward(w64, cfg, spec, b, mode)
    fd = finite_difference_grads(w64, cfg, spec, b, mode, names=names)
    for n in names:
        err = np.linalg.norm(g[n] - fd[n]) / max(np.linalg.norm(fd[n]), 1e-12)
        assert err < 1e-4, n


def test_adamw_zero_grads_no_decay_unchanged(setup):
    _, _, w = setup
    before = w.copy()
    tc = TrainConfig(weight_decay=0.0)
    adamw_step(w, {n: np.zeros_like(t) for n, t in w.items()}, AdamState(), 1e-2, tc)
    assert all(np.array_equal(w[n], before[n]) for n in w)


def test_adamw_first_step_is_sign(setup):
    _, _, w = setup
    before = w.copy()
    rng = np.random.default_rng(0)
    grads = {n: rng.normal(size=t.shape).astype(t.dtype) * 10 for n, t in w.items()}
    adamw_step(w, grads, AdamState(), 1e-3, TrainConfig(weight_decay=0.0))
    for n in w:
        assert np.allclose(w[n] - before[n], -1e-3 * np.sign(grads[n]), atol=1e-7)


def test_adamw_decay_skips_gains(setup):
    _, _, w = setup
    before = w.copy()
    adamw_step(w, {n: np.zeros_like(t) for n, t in w.items()}, AdamState(), 0.1, TrainConfig(weight_decay=0.5))
    assert np.array_equal(w["final_norm"], before["final_norm"])
    assert np.allclose(w["head"], before["head"] * (1 - 0.05))


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 0.1, 1.0) == 0.0
    assert cosine_lr(10, 100, 0.1, 1.0) == 1.0
    assert cosine_lr(100, 100, 0.1, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(55, 100, 0.1, 1.0) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        cosine_lr(101, 100, 0.1, 1.0)


def test_train_config_validation():
    with pytest.raises(ConfigError) as e:
        TrainConfig(warmup_ratio=1.5)
    assert e.value.field == "warmup_ratio"


def _toy_data(n=64, seed=0):
    # the target is a fixed function of the prompt, so the loss can fall
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        p = tuple(rng.integers(1, 16, 4).tolist())
        out.append(TrainExample(p, (p[0], p[1], (p[0] + p[2]) % 15 + 1, 3), i))
    return out


def test_training_reduces_loss_and_is_deterministic(setup):
    cfg, spec, w = setup
    tc = TrainConfig(learning_rate=1e-2, epochs=3, micro_batch=16, effective_batch=32, seed=4)
    data = _toy_data()
    b = make_batch(data, spec, 16)
    start = loss_nll(w, cfg, spec, b)
    w1, log1 = train(w, cfg, spec, data, tc, "earn")
    w2, log2 = train(w, cfg, spec, data, tc, "earn")
    assert len(log1) == 3 and [r["loss"] for r in log1] == [r["loss"] for r in log2]
    assert all(np.array_equal(w1[n], w2[n]) for n in w1)
    assert log1[0]["loss"] < start
    assert loss_nll(w1, cfg, spec, b) < start


def test_gradient_accumulation_matches_large_batch(setup):
    cfg, spec, w = setup
    data = _toy_data(32)
    a, _ = train(w, cfg, spec, data, TrainConfig(epochs=1, micro_batch=32, effective_batch=32,
                                                 learning_rate=1e-2), "earn")
    b, _ = train(w, cfg, spec, data, TrainConfig(epochs=1, micro_batch=8, effective_batch=32,
                                                 learning_rate=1e-2), "earn")
    assert all(np.allclose(a[n], b[n], atol=1e-6) for n in a)


def test_no_retraining_mode_leaves_weights(setup):
    cfg, spec, w = setup
    out, log = train(w, cfg, spec, _toy_data(), TrainConfig(epochs=2), "earn-no-rt")
    assert all(np.array_equal(out[n], w[n]) for n in w)
    assert len(log) == 2 and log[0]["loss"] == log[1]["loss"]


def test_full_depth_trajectory_equals_vanilla(setup):
    cfg, _, w = setup
    spec = RegisterSpec(1, 1, cfg.num_layers)
    tc = TrainConfig(epochs=2, micro_batch=16, effective_batch=32, learning_rate=5e-3)
    a, la = train(w, cfg, spec, _toy_data(), tc, "earn")
    b, lb = train(w, cfg, spec, _toy_data(), tc, "vanilla")
    assert [r["loss"] for r in la] == [r["loss"] for r in lb]
    assert all(np.array_equal(a[n], b[n]) for n in a)


def test_unknown_mode_rejected(setup):
    cfg, spec, w = setup
    with pytest.raises(ConfigError):
        train(w, cfg, spec, _toy_data(4), TrainConfig(), "fast")
