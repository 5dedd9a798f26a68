"""Numerics: forward oracles, analytic-vs-finite-difference gradients, Adam, EMA."""

import math

import numpy as np
import pytest

from tailssl.errors import TrainingDivergedError
from tailssl.numerics import (
    LinearLayer,
    ModelParams,
    adam_step,
    ema_update,
    encoder_backward,
    encoder_forward,
    head_backward,
    head_forward,
    init_adam,
    init_ema,
    init_params,
    iter_arrays,
    softmax,
    weighted_masked_ce,
    zeros_like_params,
)

RNG = np.random.default_rng


def tiny_params(d=3, hidden=(4, 3), k=2, seed=0):
    return init_params(d, hidden, k, RNG(seed))


# ---------------------------------------------------------------------------
# Straight-line oracles (independent re-implementations, loops and math.exp)
# ---------------------------------------------------------------------------


def oracle_mlp_forward(params, batch):
    """Per-sample, per-unit loops: relu(x @ w + b) through every layer."""
    out = []
    for row in batch:
        h = list(row)
        for layer in params.encoder_layers:
            z = []
            for j in range(layer.w.shape[1]):
                acc = layer.b[j]
                for i in range(layer.w.shape[0]):
                    acc += h[i] * layer.w[i, j]
                z.append(max(acc, 0.0))
            h = z
        out.append(h)
    return np.array(out)


def oracle_head(head, features):
    out = []
    for row in features:
        logits = []
        for j in range(head.w.shape[1]):
            acc = head.b[j]
            for i in range(head.w.shape[0]):
                acc += row[i] * head.w[i, j]
            logits.append(acc)
        out.append(logits)
    return np.array(out)


def oracle_ce(logits, targets, weights, mask, divisor):
    total = 0.0
    for i, row in enumerate(logits):
        if not mask[i]:
            continue
        m = max(row)
        denom = sum(math.exp(v - m) for v in row)
        logp = (row[targets[i]] - m) - math.log(denom)
        total += -weights[i] * logp
    return total / divisor


def numeric_grads(loss_fn, params, h=1e-5):
    """Central finite differences over every parameter entry."""
    grads = zeros_like_params(params)
    for arr, g in zip(iter_arrays(params), iter_arrays(grads)):
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gf[i] = (up - down) / (2 * h)
    return grads


def assert_grads_close(analytic, numeric, rtol, atol=1e-8):
    for a, n in zip(iter_arrays(analytic), iter_arrays(numeric)):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def test_encoder_zero_weights_gives_bias_pattern():
    params = tiny_params()
    for layer in params.encoder_layers:
        layer.w[:] = 0.0
        layer.b[:] = np.abs(layer.b)  # nonnegative so the ReLU passes it through
    batch = RNG(1).normal(size=(5, 3))
    feats, _ = encoder_forward(params, batch)
    want = params.encoder_layers[-1].b
    assert np.allclose(feats, np.tile(want, (5, 1)))


def test_encoder_identity_layer_passes_nonnegative_batch():
    params = ModelParams(
        [LinearLayer(np.eye(3), np.zeros(3))],
        LinearLayer(np.zeros((3, 2)), np.zeros(2)),
        LinearLayer(np.zeros((3, 2)), np.zeros(2)),
    )
    batch = np.abs(RNG(2).normal(size=(4, 3)))
    feats, _ = encoder_forward(params, batch)
    assert np.array_equal(feats, batch)


def test_encoder_matches_straight_line_oracle():
    params = tiny_params(d=5, hidden=(6, 4), k=3, seed=3)
    batch = RNG(4).normal(size=(3, 5))
    feats, _ = encoder_forward(params, batch)
    np.testing.assert_allclose(feats, oracle_mlp_forward(params, batch), atol=1e-12)


def test_encoder_rejects_wrong_input_dim():
    params = tiny_params(d=3)
    with pytest.raises(ValueError):
        encoder_forward(params, np.zeros((2, 4)))


def test_head_zero_weights_gives_bias_rows():
    head = LinearLayer(np.zeros((4, 3)), np.array([0.5, -1.0, 2.0]))
    logits = head_forward(head, RNG(5).normal(size=(6, 4)))
    assert np.allclose(logits, np.tile(head.b, (6, 1)))


def test_head_one_hot_weights_select_feature_column():
    w = np.zeros((4, 2))
    w[2, 0] = 1.0  # logit 0 reads feature 2
    w[0, 1] = 1.0  # logit 1 reads feature 0
    head = LinearLayer(w, np.zeros(2))
    feats = RNG(6).normal(size=(5, 4))
    logits = head_forward(head, feats)
    assert np.allclose(logits[:, 0], feats[:, 2])
    assert np.allclose(logits[:, 1], feats[:, 0])


def test_head_matches_straight_line_oracle():
    head = LinearLayer(RNG(7).normal(size=(4, 3)), RNG(8).normal(size=3))
    feats = RNG(9).normal(size=(5, 4))
    np.testing.assert_allclose(head_forward(head, feats), oracle_head(head, feats), atol=1e-12)


def test_head_rejects_dim_mismatch():
    head = LinearLayer(np.zeros((4, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        head_forward(head, np.zeros((2, 5)))


# ---------------------------------------------------------------------------
# Weighted masked cross-entropy
# ---------------------------------------------------------------------------


def test_ce_uniform_logits_is_log_k():
    for k in (2, 5, 11):
        logits = np.full((4, k), 1.7)
        loss, _ = weighted_masked_ce(
            logits, np.zeros(4, dtype=int), np.ones(4), np.ones(4, dtype=bool), 4
        )
        assert loss == pytest.approx(math.log(k), abs=1e-12)


def test_ce_all_masked_gives_zero_loss_and_gradient():
    logits = RNG(10).normal(size=(4, 3))
    loss, dlogits = weighted_masked_ce(
        logits, np.array([0, 1, 2, 1]), np.ones(4), np.zeros(4, dtype=bool), 4
    )
    assert loss == 0.0
    assert np.array_equal(dlogits, np.zeros_like(logits))


def test_ce_matches_oracle_and_finite_differences():
    rng = RNG(11)
    logits = rng.normal(size=(5, 4))
    targets = rng.integers(0, 4, size=5)
    weights = rng.uniform(0.2, 2.0, size=5)
    mask = np.array([True, False, True, True, False])
    loss, dlogits = weighted_masked_ce(logits, targets, weights, mask, 5)
    assert loss == pytest.approx(oracle_ce(logits, targets, weights, mask, 5), abs=1e-12)

    h = 1e-5
    for i in range(5):
        for j in range(4):
            pert = logits.copy()
            pert[i, j] += h
            up = oracle_ce(pert, targets, weights, mask, 5)
            pert[i, j] -= 2 * h
            down = oracle_ce(pert, targets, weights, mask, 5)
            fd = (up - down) / (2 * h)
            assert dlogits[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_ce_shift_invariance():
    rng = RNG(12)
    logits = rng.normal(size=(6, 3))
    targets = rng.integers(0, 3, size=6)
    mask = np.ones(6, dtype=bool)
    base, _ = weighted_masked_ce(logits, targets, np.ones(6), mask, 6)
    shifted, _ = weighted_masked_ce(logits + 13.7, targets, np.ones(6), mask, 6)
    assert shifted == pytest.approx(base, abs=1e-10)


def test_ce_weight_scaling_is_exactly_linear():
    rng = RNG(13)
    logits = rng.normal(size=(4, 3))
    targets = rng.integers(0, 3, size=4)
    weights = rng.uniform(0.5, 1.5, size=4)
    mask = np.array([True, True, False, True])
    loss1, d1 = weighted_masked_ce(logits, targets, weights, mask, 4)
    c = 3.0
    loss2, d2 = weighted_masked_ce(logits, targets, c * weights, mask, 4)
    assert loss2 == pytest.approx(c * loss1, rel=1e-15)
    np.testing.assert_allclose(d2, c * d1, rtol=1e-15, atol=1e-16)


def test_ce_rejects_bad_targets_and_divisor():
    logits = np.zeros((2, 3))
    with pytest.raises(ValueError):
        weighted_masked_ce(logits, np.array([0, 3]), np.ones(2), np.ones(2, dtype=bool), 2)
    with pytest.raises(ValueError):
        weighted_masked_ce(logits, np.array([0, 1]), np.ones(2), np.ones(2, dtype=bool), 0)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def full_loss(params, batch, targets, weights, mask, head_name):
    feats, _ = encoder_forward(params, batch)
    head = params.base_head if head_name == "base" else params.aux_head
    logits = head_forward(head, feats)
    loss, _ = weighted_masked_ce(logits, targets, weights, mask, len(batch))
    return loss


def analytic_full_grads(params, batch, targets, weights, mask, head_name):
    feats, cache = encoder_forward(params, batch)
    head = params.base_head if head_name == "base" else params.aux_head
    logits = head_forward(head, feats)
    _, dlogits = weighted_masked_ce(logits, targets, weights, mask, len(batch))
    g_head, dfeat = head_backward(head, feats, dlogits)
    grads = zeros_like_params(params)
    target = grads.base_head if head_name == "base" else grads.aux_head
    target.w += g_head.w
    target.b += g_head.b
    for acc, g in zip(grads.encoder_layers, encoder_backward(params, cache, dfeat)):
        acc.w += g.w
        acc.b += g.b
    return grads


def test_zero_upstream_gradient_gives_zero_param_gradients():
    params = tiny_params(seed=14)
    batch = RNG(15).normal(size=(3, 3))
    feats, cache = encoder_forward(params, batch)
    grads = encoder_backward(params, cache, np.zeros_like(feats))
    assert all(np.all(g.w == 0) and np.all(g.b == 0) for g in grads)


def test_single_sample_backward_matches_finite_differences():
    params = tiny_params(d=4, hidden=(5, 3), k=3, seed=16)
    batch = RNG(17).normal(size=(1, 4))
    targets = np.array([2])
    weights = np.ones(1)
    mask = np.ones(1, dtype=bool)
    analytic = analytic_full_grads(params, batch, targets, weights, mask, "base")
    numeric = numeric_grads(lambda: full_loss(params, batch, targets, weights, mask, "base"), params)
    assert_grads_close(analytic, numeric, rtol=1e-5, atol=1e-9)


def test_encoder_gradients_add_across_losses():
    params = tiny_params(d=4, hidden=(5, 3), k=3, seed=18)
    batch = RNG(19).normal(size=(4, 4))
    t1 = np.array([0, 1, 2, 0])
    t2 = np.array([2, 2, 1, 0])
    ones = np.ones(4)
    mask = np.ones(4, dtype=bool)
    g_base = analytic_full_grads(params, batch, t1, ones, mask, "base")
    g_aux = analytic_full_grads(params, batch, t2, ones, mask, "aux")

    # joint backward: one encoder pass fed by the sum of head dfeatures
    feats, cache = encoder_forward(params, batch)
    _, d1 = weighted_masked_ce(head_forward(params.base_head, feats), t1, ones, mask, 4)
    _, d2 = weighted_masked_ce(head_forward(params.aux_head, feats), t2, ones, mask, 4)
    _, df1 = head_backward(params.base_head, feats, d1)
    _, df2 = head_backward(params.aux_head, feats, d2)
    joint = encoder_backward(params, cache, df1 + df2)
    for sep_b, sep_a, j in zip(g_base.encoder_layers, g_aux.encoder_layers, joint):
        np.testing.assert_allclose(sep_b.w + sep_a.w, j.w, atol=1e-13)
        np.testing.assert_allclose(sep_b.b + sep_a.b, j.b, atol=1e-13)


def test_backward_rejects_mismatched_cache():
    params = tiny_params(seed=20)
    _, cache = encoder_forward(params, RNG(21).normal(size=(3, 3)))
    with pytest.raises(ValueError):
        encoder_backward(params, cache, np.zeros((2, params.feature_dim)))


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_randomized_gradient_suite(seed):
    """Full-path gradients match central differences (h=1e-5) at rtol 1e-4."""
    rng = RNG(100 + seed)
    d = int(rng.integers(2, 8))
    k = int(rng.integers(2, 5))
    b = int(rng.integers(1, 5))
    hidden = tuple(int(h) for h in rng.integers(2, 7, size=2))
    params = init_params(d, hidden, k, rng)
    batch = rng.normal(size=(b, d))
    targets = rng.integers(0, k, size=b)
    weights = rng.uniform(0.1, 2.0, size=b)
    mask = rng.random(b) < 0.8
    for head_name in ("base", "aux"):
        analytic = analytic_full_grads(params, batch, targets, weights, mask, head_name)
        numeric = numeric_grads(
            lambda: full_loss(params, batch, targets, weights, mask, head_name), params
        )
        assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-8)


# ---------------------------------------------------------------------------
# Adam and EMA
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params_and_moments_untouched():
    params = tiny_params(seed=22)
    before = params.copy()
    state = init_adam(params)
    adam_step(params, zeros_like_params(params), state, lr=0.1)
    for p, b in zip(iter_arrays(params), iter_arrays(before)):
        np.testing.assert_array_equal(p, b)
    for m in iter_arrays(state.first_moment):
        assert np.all(m == 0)
    assert state.step_count == 1


def test_adam_single_step_matches_hand_executed_update():
    params = tiny_params(seed=23)
    before = params.copy()
    grads = zeros_like_params(params)
    rng = RNG(24)
    for g in iter_arrays(grads):
        g += rng.normal(size=g.shape)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    state = init_adam(params, b1, b2, eps)
    adam_step(params, grads, state, lr)
    for p, prev, g in zip(iter_arrays(params), iter_arrays(before), iter_arrays(grads)):
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        mhat = m / (1 - b1)
        vhat = v / (1 - b2)
        want = prev - lr * mhat / (np.sqrt(vhat) + eps)
        np.testing.assert_allclose(p, want, atol=1e-15)
        # after one step the update magnitude is lr*|g|/(|g|+eps)
        np.testing.assert_allclose(np.abs(p - prev), lr * np.abs(g) / (np.abs(g) + eps), atol=1e-15)


def test_adam_two_identical_runs_are_bitwise_identical():
    def run():
        params = tiny_params(seed=25)
        state = init_adam(params)
        rng = RNG(26)
        for _ in range(5):
            grads = zeros_like_params(params)
            for g in iter_arrays(grads):
                g += rng.normal(size=g.shape)
            adam_step(params, grads, state, lr=0.05)
        return params

    a, b = run(), run()
    for x, y in zip(iter_arrays(a), iter_arrays(b)):
        assert np.array_equal(x, y)


def test_adam_rejects_non_finite_gradients():
    params = tiny_params(seed=27)
    grads = zeros_like_params(params)
    grads.base_head.w[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        adam_step(params, grads, init_adam(params), lr=0.01)


def test_ema_decay_endpoints_and_update():
    params = tiny_params(seed=28)
    ema = init_ema(params, decay=0.0)
    shifted = params.copy()
    for arr in iter_arrays(shifted):
        arr += 1.0
    ema_update(ema, shifted)  # decay 0 -> ema equals tracked params
    for e, p in zip(iter_arrays(ema.params), iter_arrays(shifted)):
        np.testing.assert_array_equal(e, p)

    ema = init_ema(params, decay=1.0)
    ema_update(ema, shifted)  # decay 1 -> ema never moves
    for e, p in zip(iter_arrays(ema.params), iter_arrays(params)):
        np.testing.assert_array_equal(e, p)


def test_ema_standard_decay_value():
    params = tiny_params(seed=29)
    for arr in iter_arrays(params):
        arr[:] = 0.0
    ema = init_ema(params, decay=0.999)
    ones = params.copy()
    for arr in iter_arrays(ones):
        arr[:] = 1.0
    ema_update(ema, ones)
    for e in iter_arrays(ema.params):
        np.testing.assert_allclose(e, 0.001, atol=1e-15)


def test_softmax_rows_sum_to_one():
    p = softmax(RNG(30).normal(size=(7, 5)) * 10)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)
