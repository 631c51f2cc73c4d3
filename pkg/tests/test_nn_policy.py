import numpy as np
import pytest
from scipy import stats

from airblow.actions import BlowAction
from airblow.nn import Conv2d, Dense, Upsample2x
from airblow.policy import (AdamState, BlowScoreModel, GraspValueModel, MLPModel, ReplayBuffer, Transition,
                            adam_step, epsilon_schedule, image_input, mse_backward, select_epsilon_greedy)
from airblow.verify import finite_difference_error, random_batches, small_models


def test_gradients_match_finite_differences():
    g, b = small_models(0)
    gb, bb = random_batches(np.random.default_rng(0))
    assert finite_difference_error(g, gb) <= 1e-3
    assert finite_difference_error(b, bb) <= 1e-3


def test_mlp_gradient_matches_finite_differences():
    m = MLPModel((3, 5, 4, 1), out_sigmoid=True, dtype=np.float64, seed=2)
    rng = np.random.default_rng(1)
    batch = [Transition(rng.normal(size=3), None, float(rng.uniform())) for _ in range(6)]
    assert finite_difference_error(m, batch) <= 1e-5


def test_single_linear_unit():
    m = MLPModel((1, 1), dtype=np.float64)
    m.set_params(np.array([1.0, 0.0]))      # weight 1, bias 0
    loss, g = mse_backward(m, [Transition(np.array([1.0]), None, 0.0)])
    assert loss == 1.0
    assert g[0] == 2.0 and g[1] == 2.0


def test_mse_backward_errors():
    m = MLPModel((1, 1), dtype=np.float64)
    with pytest.raises(ValueError):
        mse_backward(m, [])
    m.set_params(np.array([np.inf, 0.0]))
    with pytest.raises(FloatingPointError):
        mse_backward(m, [Transition(np.array([1.0]), None, 0.0)])


def test_adam_first_step_is_lr_times_sign():
    p = np.array([1.0, -2.0, 0.5])
    st = AdamState.for_params(p, lr=0.1, weight_decay=0.0)
    adam_step(st, p, np.array([3.0, -0.01, 1e3]))
    assert np.allclose(p, [0.9, -1.9, 0.4], atol=1e-6)
    assert st.t == 1


def test_adam_weight_decay_decoupled():
    p = np.array([2.0])
    st = AdamState.for_params(p, lr=0.1, weight_decay=0.5)
    adam_step(st, p, np.array([0.0]))
    assert p[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step(AdamState.for_params(np.zeros(3)), np.zeros(3), np.zeros(2))


def test_replay_fifo():
    buf = ReplayBuffer(3)
    buf.extend([0, 1, 2, 3, 4])
    assert buf.contents() == [2, 3, 4]
    assert len(buf) == 3
    s = buf.sample(50, np.random.default_rng(0))
    assert set(s) <= {2, 3, 4} and len(s) == 50
    with pytest.raises(IndexError):
        ReplayBuffer(2).sample(1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_epsilon_zero_is_argmax_lowest_tie():
    rng = np.random.default_rng(0)
    assert select_epsilon_greedy([0.1, 0.9, 0.9, 0.2], 0.0, rng) == 1


def test_epsilon_zero_respects_valid():
    rng = np.random.default_rng(0)
    assert select_epsilon_greedy([0.1, 0.9, 0.5], 0.0, rng, valid=[True, False, True]) == 2


def test_epsilon_one_is_uniform():
    rng = np.random.default_rng(0)
    n = 4000
    picks = [select_epsilon_greedy([5.0, 0, 0, 0, 0], 1.0, rng) for _ in range(n)]
    counts = np.bincount(picks, minlength=5)
    assert stats.chisquare(counts).pvalue > 0.001


def test_epsilon_half_rate():
    rng = np.random.default_rng(1)
    n = 4000
    picks = np.array([select_epsilon_greedy([1.0, 0, 0, 0], 0.5, rng) for _ in range(n)])
    # P(pick 0) = 0.5 + 0.5 / 4
    assert abs(np.mean(picks == 0) - 0.625) < 4 * np.sqrt(0.625 * 0.375 / n)


def test_epsilon_consumes_one_draw_when_greedy():
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    select_epsilon_greedy([1.0, 2.0], 0.0, a)
    b.random()
    assert a.random() == b.random()


def test_epsilon_errors():
    with pytest.raises(ValueError):
        select_epsilon_greedy([], 0.1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        select_epsilon_greedy([1.0], 1.5, np.random.default_rng(0))


def test_epsilon_schedule():
    assert epsilon_schedule(0, 100) == pytest.approx(0.5)
    assert epsilon_schedule(25, 100) == pytest.approx(0.275)
    assert epsilon_schedule(50, 100) == pytest.approx(0.05)
    assert epsilon_schedule(99, 100) == pytest.approx(0.05)


def test_image_input():
    px = np.zeros((4, 6, 3), np.uint8)
    px[..., 1] = 255
    x = image_input(px)
    assert x.shape == (1, 3, 4, 6)
    assert np.allclose(x[0, 0], -0.5) and np.allclose(x[0, 1], 0.5)


def test_grasp_model_output_shape_and_range():
    m = GraspValueModel()
    x = image_input(np.random.default_rng(0).integers(0, 256, (8, 64, 64, 3)).astype(np.uint8))
    y = m.forward(x)
    assert y.shape == (8, 64, 64)
    assert np.all((y >= 0) & (y <= 1))
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 3, 40, 40), np.float32))


def test_grasp_model_is_equivariant_to_batch_order():
    m = GraspValueModel((4, 4, 4, 4))
    x = image_input(np.random.default_rng(0).integers(0, 256, (5, 32, 32, 3)).astype(np.uint8))
    perm = np.array([3, 0, 4, 1, 2])
    assert np.allclose(m.forward(x)[perm], m.forward(x[perm]), atol=1e-6)


def test_blow_model_scores_and_permutation():
    m = BlowScoreModel()
    rng = np.random.default_rng(0)
    img = image_input(rng.integers(0, 256, (64, 64, 3)).astype(np.uint8))
    acts = rng.uniform(-1, 1, (64, 2))
    s = m.forward(img, acts, np.zeros(64, dtype=np.int64))
    assert s.shape == (64,) and np.all((s >= 0) & (s <= 1))
    perm = rng.permutation(64)
    s2 = m.forward(img, acts[perm], np.zeros(64, dtype=np.int64))
    assert np.allclose(s2, s[perm], atol=1e-6)
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 3, 32, 32), np.float32), acts[:1])


def test_blow_model_rejects_bad_architecture():
    with pytest.raises(ValueError):
        BlowScoreModel(channels=(8,) * 6, strides=(1,) * 6)
    with pytest.raises(ValueError):
        BlowScoreModel(resolution=60)


def test_conv_and_dense_shapes():
    c = Conv2d(3, 5, 3, 2)
    assert c.size == 5 * 3 * 9 + 5
    assert Dense(4, 7).size == 35
    up = Upsample2x()
    y = up.forward(np.arange(4.0).reshape(1, 1, 2, 2))
    assert y.shape == (1, 1, 4, 4) and y[0, 0, 1, 1] == 0.0 and y[0, 0, 3, 3] == 3.0


def test_model_set_params_shape():
    m = MLPModel((2, 3, 1))
    with pytest.raises(ValueError):
        m.set_params(np.zeros(3))
    m.set_params(np.ones(m.n_params))
    assert np.all(m.params == 1)


def test_same_seed_same_init():
    assert np.array_equal(BlowScoreModel(seed=3).params, BlowScoreModel(seed=3).params)
    assert not np.array_equal(BlowScoreModel(seed=3).params, BlowScoreModel(seed=4).params)


def test_mlp_training_halves_loss():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (256, 2))
    y = 0.5 + 0.4 * np.sin(2 * x[:, 0]) * x[:, 1]
    data = [Transition(a, None, float(b)) for a, b in zip(x, y)]
    m = MLPModel((2, 32, 32, 1), out_sigmoid=True, seed=1)
    st = AdamState.for_params(m.params, lr=1e-2, weight_decay=0.0)
    first, _ = mse_backward(m, data)
    for _ in range(200):
        batch = [data[i] for i in rng.integers(len(data), size=32)]
        _, g = mse_backward(m, batch)
        adam_step(st, m.params, g)
    last, _ = mse_backward(m, data)
    assert last <= 0.5 * first


def test_blow_model_training_halves_loss():
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (4, 64, 64, 3)).astype(np.uint8)
    data = []
    for _ in range(64):
        a = BlowAction(float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-30, 30)))
        data.append(Transition(imgs[rng.integers(4)], a, 0.5 + 0.4 * a.normalized()[0]))
    m = BlowScoreModel(seed=0)
    st = AdamState.for_params(m.params, lr=1e-3)
    first, _ = mse_backward(m, data)
    for _ in range(200):
        _, g = mse_backward(m, [data[i] for i in rng.integers(len(data), size=16)])
        adam_step(st, m.params, g)
    last, _ = mse_backward(m, data)
    assert last <= 0.5 * first
