import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_check
from xraykit.head import (
    LEARNABLE,
    AdamState,
    Checkpoint,
    Dataset,
    DimensionMismatch,
    EmptySet,
    EpochOutOfRange,
    HeadParams,
    TrainConfig,
    UninitializedBatchNorm,
    adam_step,
    bce_masked,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    forward,
    loss_and_grads,
    lr_at,
    predict,
    select_best,
    train,
)


def zero_params(n_in=4, n_h=3, n_out=5):
    p = HeadParams.init(n_in, n_h, n_out)
    p.W1[:] = 0
    p.W2[:] = 0
    p.stats_ready = True
    return p


def small_problem(n=6, n_in=8, n_h=4, n_out=3, seed=0):
    rng = np.random.default_rng(seed)
    p = HeadParams.init(n_in, n_h, n_out, seed=seed)
    p.gamma[:] = rng.uniform(0.5, 1.5, n_h)
    p.beta[:] = rng.normal(0, 0.3, n_h)
    p.b1[:] = rng.normal(0, 0.3, n_h)
    p.b2[:] = rng.normal(0, 0.3, n_out)
    X = rng.normal(size=(n, n_in))
    Y = (rng.random((n, n_out)) < 0.5).astype(float)
    M = (rng.random((n, n_out)) < 0.8).astype(float)
    return p, X, Y, M


def test_zero_head_outputs_half():
    probs, logits = forward(zero_params(), np.random.default_rng(0).normal(size=(7, 4)))
    assert probs.shape == (7, 5)
    assert np.all(probs == 0.5) and np.all(logits == 0)


def test_sigmoid_of_log3():
    p = zero_params(n_out=1)
    p.b2[:] = math.log(3)
    assert predict(p, np.zeros(4))[0, 0] == pytest.approx(0.75, abs=1e-12)


def test_infer_mode_is_pure():
    p, X, _, _ = small_problem()
    p.stats_ready = True
    before = p.copy()
    a = predict(p, X)
    b = predict(p, X)
    assert np.array_equal(a, b) and p == before


def test_train_mode_updates_running_stats():
    p, X, _, _ = small_problem()
    before = p.running_mean.copy()
    forward(p, X, "train")
    assert not np.array_equal(p.running_mean, before)


def test_infer_needs_statistics():
    with pytest.raises(UninitializedBatchNorm):
        predict(HeadParams.init(4, 3, 5), np.zeros((2, 4)))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        predict(zero_params(), np.zeros((2, 1407)))


def test_single_sample_batch_warns():
    p, X, _, _ = small_problem()
    with pytest.warns(UserWarning, match="batch of one"):
        forward(p, X[:1], "train")


def test_bce_examples():
    assert bce_masked([0.5], [1]) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_masked([1.0, 0.0], [1, 0]) <= 1.1e-7
    assert bce_masked([0.5, 0.99], [1, 0], [1, 0]) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_masked([0.3, 0.7], [1, 0], [0, 0]) == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed):
    p, X, Y, M = small_problem(seed=seed)
    finite_difference_check(p, X, Y, M)


def test_masked_label_gets_no_gradient_through_output():
    p, X, Y, M = small_problem()
    M[:, 1] = 0
    _, g = loss_and_grads(p, X, Y, M)
    assert np.all(g["W2"][1] == 0) and g["b2"][1] == 0


def test_duplicated_batch_gives_same_gradient():
    p, X, Y, M = small_problem()
    _, g1 = loss_and_grads(p, X, Y, M)
    _, g2 = loss_and_grads(p, np.vstack([X, X]), np.vstack([Y, Y]), np.vstack([M, M]))
    for k in LEARNABLE:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-9, atol=1e-12)


def test_empty_batch():
    p, _, _, _ = small_problem()
    with pytest.raises(EmptySet):
        loss_and_grads(p, np.zeros((0, 8)), np.zeros((0, 3)), np.zeros((0, 3)))


def test_adam_zero_gradient_keeps_params():
    p, _, _, _ = small_problem()
    grads = {k: np.zeros_like(getattr(p, k)) for k in LEARNABLE}
    new, state = adam_step(p, AdamState.zeros_like(p), grads, 0.01)
    assert new == p and state.step == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 1e-1))
def test_adam_first_step_is_lr_times_sign(seed, lr):
    p, _, _, _ = small_problem()
    rng = np.random.default_rng(seed)
    grads = {k: rng.normal(size=getattr(p, k).shape) for k in LEARNABLE}
    new, _ = adam_step(p, AdamState.zeros_like(p), grads, lr)
    for k in LEARNABLE:
        step = getattr(new, k) - getattr(p, k)
        # bias-corrected moments give |m_hat| = sqrt(v_hat) = |g| on step one
        g = grads[k]
        np.testing.assert_allclose(step, -lr * g / (np.abs(g) + 1e-8), rtol=1e-9, atol=1e-15)
        assert np.all(np.abs(step) <= lr)


def test_adam_is_pure_and_deterministic():
    p, X, Y, M = small_problem()
    _, g = loss_and_grads(p, X, Y, M)
    s = AdamState.zeros_like(p)
    a = adam_step(p, s, g, 0.003)
    b = adam_step(p, s, g, 0.003)
    assert a[0] == b[0] and s.step == 0


def test_step_schedule_values():
    cfg = TrainConfig(lr0=0.003, epochs=100)
    assert [lr_at(cfg, e) for e in (0, 9, 10, 25, 99)] == [0.003, 0.003, 0.0015, 0.00075, 0.003 * 0.5**9]
    with pytest.raises(EpochOutOfRange):
        lr_at(cfg, 100)
    with pytest.raises(EpochOutOfRange):
        lr_at(cfg, -1)


def test_cosine_schedule_values():
    cfg = TrainConfig(lr0=0.003, epochs=100, schedule="cosine")
    assert lr_at(cfg, 0) == 0.003
    assert lr_at(cfg, 50) == pytest.approx(0.0015, abs=1e-15)


def _datasets(n=200, dim=20, seed=0):
    from xraykit.fixtures import separable_features

    X, Y, M = separable_features(n=n, dim=dim, seed=seed)
    cut = int(0.8 * n)
    return Dataset(X[:cut], Y[:cut], M[:cut]), Dataset(X[cut:], Y[cut:], M[cut:])


def test_training_steps_and_determinism():
    tr, va = _datasets()
    cfg = TrainConfig(epochs=6, batch_size=32, n_hidden=8, seed=3)
    a = train(tr, va, cfg)
    b = train(tr, va, cfg)
    assert len(a) == 6
    assert a[-1].steps == 6 * math.ceil(160 / 32)
    assert all(x.params == y.params and x.mean_auc == y.mean_auc for x, y in zip(a, b))
    assert a[5].train_loss < a[0].train_loss
    assert a[0].params.stats_ready


def test_select_best_ties_go_to_earliest():
    p = HeadParams.init(2, 2, 1)
    ck = [Checkpoint(i, p, auc) for i, auc in enumerate([0.7, 0.9, 0.9, 0.8])]
    assert select_best(ck).epoch == 1
    assert select_best([Checkpoint(0, p, 0.5)]).epoch == 0
    with pytest.raises(EmptySet):
        select_best([])


def test_checkpoint_round_trip():
    tr, va = _datasets()
    ck = train(tr, va, TrainConfig(epochs=2, batch_size=32, n_hidden=8))[-1]
    back = checkpoint_from_bytes(checkpoint_to_bytes(ck))
    assert back.params == ck.params and back.epoch == ck.epoch and back.mean_auc == ck.mean_auc
    assert np.array_equal(predict(back.params, va.X), predict(ck.params, va.X))
