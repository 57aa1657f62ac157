import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpselft import nn
from dpselft.optim import (
    NO_CLIP,
    AdamState,
    DpTrainConfig,
    adamw_update,
    clip,
    clipped_sum,
    dp_adamw_step,
    dp_sgd_step,
    noisy_aggregate,
    poisson_batch,
    private_gradient,
    train,
)

from conftest import small_model, toy_data


# --- clip ------------------------------------------------------------------


def test_clip_scales_down():
    np.testing.assert_allclose(clip({1: np.array([3.0, 4.0])}, 1.0)[1], [0.6, 0.8])


def test_clip_leaves_small_gradients():
    g = np.array([0.3, 0.4])
    assert clip({1: g}, 1.0)[1].tobytes() == g.tobytes()


def test_clip_zero():
    np.testing.assert_array_equal(clip({1: np.zeros(3)}, 1.0)[1], np.zeros(3))


def test_clip_uses_joint_norm():
    out = clip({1: np.array([3.0]), 2: np.array([4.0])}, 1.0)
    np.testing.assert_allclose([out[1][0], out[2][0]], [0.6, 0.8])


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)),
    st.floats(1e-3, 1e3),
)
def test_clip_norm_bound(v, C):
    out = clip({1: v}, C)
    assert np.linalg.norm(out[1]) <= C + 1e-9


# --- noisy aggregation -----------------------------------------------------


def test_aggregate_plain_mean_without_noise():
    out = noisy_aggregate([{1: np.array([1.0, 0.0])}, {1: np.array([0.0, 1.0])}], 2.0, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out[1], [0.5, 0.5])


def test_aggregate_single_clipped():
    out = noisy_aggregate([{1: np.array([3.0, 4.0])}], 1.0, 0.0, np.random.default_rng(0))
    np.testing.assert_allclose(out[1], [0.6, 0.8])


def test_aggregate_empty_batch():
    with pytest.raises(ValueError):
        noisy_aggregate([], 1.0, 1.0, np.random.default_rng(0))


def test_aggregate_mismatched_keys():
    with pytest.raises(ValueError):
        noisy_aggregate([{1: np.zeros(2)}, {2: np.zeros(2)}], 1.0, 0.0, np.random.default_rng(0))


def test_aggregate_noise_moments():
    # sigma=1, C=1, |B|=4, zero grads: each coordinate ~ N(0, 1/16)
    rng = np.random.default_rng(2024)
    zeros = [{1: np.zeros(1)} for _ in range(4)]
    draws = np.array([noisy_aggregate(zeros, 1.0, 1.0, rng)[1][0] for _ in range(100_000)])
    se = math.sqrt(1 / 16 / draws.size)
    assert abs(draws.mean()) < 4 * se
    assert abs(draws.var(ddof=1) / (1 / 16) - 1) < 0.05


def test_aggregate_exact_mean_when_unclipped():
    rng = np.random.default_rng(1)
    grads = [{1: rng.uniform(-0.2, 0.2, 5)} for _ in range(8)]
    out = noisy_aggregate(grads, 1.0, 0.0, rng)
    acc = np.zeros(5)
    for g in grads:
        acc += g[1]
    assert out[1].tobytes() == (acc / 8).tobytes()


def test_neighboring_clipped_sums_within_C():
    rng = np.random.default_rng(7)
    for _ in range(200):
        C = float(rng.uniform(0.1, 3))
        n = int(rng.integers(1, 10))
        batch = [{1: rng.standard_normal(4) * rng.uniform(0, 5), 2: rng.standard_normal(2)} for _ in range(n)]
        extra = {1: rng.standard_normal(4) * 10, 2: rng.standard_normal(2)}
        a = clipped_sum(batch, C)
        b = clipped_sum(batch + [extra], C)
        diff = math.sqrt(sum(float(np.sum((a[l] - b[l]) ** 2)) for l in a))
        assert diff <= C * (1 + 1e-12)


# --- DP-SGD ----------------------------------------------------------------


def quad_model():
    m = nn.build_model([nn.dense(1, 2)], 0)
    m.params[0][:] = np.array([0.5, -0.5, 0.0, 0.0])
    return m


def test_zero_learning_rate_is_rejected():
    # eta = 0 would be a no-op step; the config requires eta > 0 instead
    with pytest.raises(ValueError):
        DpTrainConfig(lr=0.0)


def test_sigma0_zero_gradient_step_is_noop():
    m = quad_model()
    m.params[0][:] = 0  # uniform softmax on a balanced batch: mean gradient is zero
    data = nn.Dataset(np.array([[1.0], [1.0]]), np.array([0, 1]))
    dp_sgd_step(m, data, [1], DpTrainConfig(noise_multiplier=0.0, batch_size=2), np.random.default_rng(0))
    np.testing.assert_array_equal(m.params[0], np.zeros(4))


def test_sgd_step_matches_hand_computation():
    # W = [[a],[b]], b = 0, x = 1, label 0: dL/dz = softmax(z) - e0
    m = quad_model()
    x, y = np.array([[1.0]]), np.array([0])
    z = np.array([0.5, -0.5])
    p = np.exp(z) / np.exp(z).sum()
    dz = p - np.array([1.0, 0.0])
    expected = m.params[0] - 0.1 * np.concatenate([dz * 1.0, dz])
    cfg = DpTrainConfig(clip=NO_CLIP, noise_multiplier=0.0, lr=0.1, batch_size=1)
    dp_sgd_step(m, nn.Dataset(x, y), [1], cfg, np.random.default_rng(0))
    np.testing.assert_allclose(m.params[0], expected, rtol=1e-14)


def test_sgd_step_freezes_other_layers():
    m = small_model(seed=2, dims=(3, 4, 4, 2))
    frozen = [m.params[i].tobytes() for i in (2, 4)]
    dp_sgd_step(m, toy_data(8, 3, 2), [1], DpTrainConfig(batch_size=8), np.random.default_rng(0))
    assert [m.params[i].tobytes() for i in (2, 4)] == frozen


def test_sgd_sigma0_no_clip_equals_plain_sgd_bitwise():
    data = toy_data(32, 3, 2, seed=3)
    m1 = small_model(seed=3)
    m2 = m1.copy()
    cfg = DpTrainConfig(clip=NO_CLIP, noise_multiplier=0.0, lr=0.05, batch_size=32)
    for _ in range(50):
        dp_sgd_step(m1, data, [1, 3], cfg, np.random.default_rng(0))
        pe = nn.per_example_grads(m2, data.X, data.y, [1, 3])
        for l in (1, 3):
            acc = np.zeros(m2.layer_size(l))
            for row in pe[l]:
                acc += row
            m2.params[l - 1] += -0.05 * (acc / 32)
    assert m1.state_bytes() == m2.state_bytes()


def test_config_validation():
    with pytest.raises(ValueError):
        DpTrainConfig(clip=0)
    with pytest.raises(ValueError):
        DpTrainConfig(clip=NO_CLIP, noise_multiplier=1.0)
    with pytest.raises(ValueError):
        DpTrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        DpTrainConfig(batch_size=0)


# --- DP-AdamW --------------------------------------------------------------


def test_adamw_first_step_hand_computation():
    m = nn.build_model([nn.dense(1, 2)], 0)
    theta0 = m.params[0].copy()
    g = {1: np.array([0.5, -2.0, 1e-3, 0.0])}
    cfg = DpTrainConfig(lr=0.01)
    state = AdamState.for_layers(m, [1])
    adamw_update(m, g, cfg, state)
    m_hat = (0.1 * g[1]) / 0.1
    v_hat = (0.001 * g[1] ** 2) / 0.001
    np.testing.assert_allclose(m.params[0], theta0 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-12)


def test_adamw_zero_gradient_constant():
    m = small_model(seed=4)
    before = m.state_bytes()
    state = AdamState.for_layers(m, [1])
    for _ in range(10):
        adamw_update(m, {1: np.zeros(m.layer_size(1))}, DpTrainConfig(), state)
    assert m.state_bytes() == before


def test_adamw_pure_decay():
    m = small_model(seed=4)
    theta = m.params[0].copy()
    cfg = DpTrainConfig(lr=0.1, weight_decay=0.5)
    state = AdamState.for_layers(m, [1])
    for _ in range(3):
        adamw_update(m, {1: np.zeros(m.layer_size(1))}, cfg, state)
        theta = theta - 0.1 * 0.5 * theta
    np.testing.assert_allclose(m.params[0], theta, rtol=1e-15)


def test_adamw_state_mismatch():
    m = small_model()
    state = AdamState.for_layers(m, [1])
    with pytest.raises(ValueError):
        dp_adamw_step(m, toy_data(4, 3, 2), [3], DpTrainConfig(), state, np.random.default_rng(0))


def test_adamw_second_moment_nonnegative():
    m = small_model(seed=5)
    state = AdamState.for_layers(m, [1, 3])
    rng = np.random.default_rng(0)
    for _ in range(5):
        dp_adamw_step(m, toy_data(16, 3, 2), [1, 3], DpTrainConfig(batch_size=16), state, rng)
    assert all(np.all(v >= 0) for v in state.v.values())
    assert state.t == 5


# --- sampling and training loop ---------------------------------------------


def test_poisson_batch_rate():
    rng = np.random.default_rng(0)
    sizes = [poisson_batch(1000, 0.064, rng).size for _ in range(2000)]
    assert abs(np.mean(sizes) - 64) < 4 * math.sqrt(1000 * 0.064 * 0.936 / 2000)


def test_empty_poisson_batch_still_adds_noise():
    m = small_model()
    empty = nn.Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int))
    g = private_gradient(m, empty, [1], DpTrainConfig(batch_size=4), np.random.default_rng(0))
    assert np.any(g[1] != 0)


def test_training_is_bit_reproducible():
    data = toy_data(128, 3, 2, seed=9)
    runs = []
    for _ in range(2):
        m = small_model(seed=9)
        train(m, data, [1, 3], DpTrainConfig(batch_size=16, steps=20), np.random.default_rng(42))
        runs.append(m.state_bytes())
    assert runs[0] == runs[1]


def test_training_sgd_option_and_unknown_optimizer():
    data = toy_data(32, 3, 2)
    train(small_model(), data, [1], DpTrainConfig(batch_size=8, steps=2), np.random.default_rng(0), optimizer="sgd")
    with pytest.raises(ValueError):
        train(small_model(), data, [1], DpTrainConfig(batch_size=8, steps=2), np.random.default_rng(0), optimizer="lion")
