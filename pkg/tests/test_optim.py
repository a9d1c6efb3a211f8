import numpy as np
import pytest

from krts.autograd import Parameter
from krts.optim import Adam, AdamConfig, LinearDecay, adam_step, clip_grad_norm, global_grad_norm


def test_first_step_on_a_scalar():
    values, m, v = adam_step(
        [np.array([1.0])], [np.array([0.5])], [np.zeros(1)], [np.zeros(1)], t=1, lr=2.5e-4,
        config=AdamConfig(),
    )
    # bias correction turns m_hat into g and v_hat into g^2
    assert values[0][0] == pytest.approx(1.0 - 2.5e-4 * 0.5 / (0.5 + 1e-5))
    assert m[0][0] == pytest.approx(0.05)
    assert v[0][0] == pytest.approx(0.00025)


def test_unit_gradient_moves_by_the_learning_rate():
    values, _, _ = adam_step(
        [np.array([1.0])], [np.array([1.0])], [np.zeros(1)], [np.zeros(1)], t=1, lr=2.5e-4,
        config=AdamConfig(),
    )
    assert values[0][0] == pytest.approx(1.0 - 2.5e-4 / (1.0 + 1e-5), abs=1e-12)


def test_zero_gradient_keeps_values():
    value = np.array([0.3, -2.0])
    values, _, _ = adam_step([value], [np.zeros(2)], [np.zeros(2)], [np.zeros(2)], 1, 1e-3, AdamConfig())
    assert np.array_equal(values[0], value)


def test_zero_learning_rate_keeps_values():
    value = np.array([0.3, -2.0])
    values, _, _ = adam_step([value], [np.ones(2)], [np.zeros(2)], [np.zeros(2)], 3, 0.0, AdamConfig())
    assert np.array_equal(values[0], value)


def test_step_counter_starts_at_one():
    with pytest.raises(ValueError):
        adam_step([np.zeros(1)], [np.zeros(1)], [np.zeros(1)], [np.zeros(1)], 0, 1e-3, AdamConfig())


def test_inputs_are_not_mutated():
    value, m, v = np.ones(3), np.zeros(3), np.zeros(3)
    adam_step([value], [np.ones(3)], [m], [v], 1, 0.1, AdamConfig())
    assert np.array_equal(value, np.ones(3))
    assert not m.any() and not v.any()


@pytest.mark.parametrize("consumed, expected", [(0, 2.5e-4), (50, 1.25e-4), (100, 0.0), (150, 0.0)])
def test_linear_decay(consumed, expected):
    assert LinearDecay(2.5e-4, 100).lr(consumed) == pytest.approx(expected)


def test_linear_decay_without_budget_is_finished():
    assert LinearDecay(1e-3, 0).lr(0) == 0.0


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2), name="a"), Parameter(np.zeros(1), name="b")
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([4.0])
    assert clip_grad_norm([a, b], 0.5) == pytest.approx(5.0)
    assert global_grad_norm([a, b]) == pytest.approx(0.5, rel=1e-5)
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(0.5, rel=1e-5)
    assert np.allclose(a.grad, [0.3, 0.0], rtol=1e-5)


def test_adam_optimizer_updates_parameters():
    w = Parameter(np.array([1.0, -1.0]), name="w")
    optimizer = Adam([w], AdamConfig())
    for _ in range(3):
        optimizer.zero_grad()
        w.grad = 2.0 * w.data
        optimizer.step(0.1)
    assert optimizer.step_count == 3
    assert abs(w.data[0]) < 1.0 and abs(w.data[1]) < 1.0
    assert optimizer.first_moments[0].shape == w.shape


def test_adam_resumes_from_saved_moments():
    w1 = Parameter(np.array([0.5]), name="w")
    w2 = Parameter(np.array([0.5]), name="w")
    first, second = Adam([w1], AdamConfig()), Adam([w2], AdamConfig())
    w1.grad = np.array([0.2])
    first.step(0.01)
    w2.data = w1.data.copy()
    second.load_moments(first.step_count, first.first_moments, first.second_moments)
    for optimizer, param in ((first, w1), (second, w2)):
        param.grad = np.array([-0.7])
        optimizer.step(0.01)
    assert np.array_equal(w1.data, w2.data)


def test_adam_rejects_mismatched_moments():
    optimizer = Adam([Parameter(np.zeros(2), name="w")], AdamConfig())
    with pytest.raises(ValueError):
        optimizer.load_moments(1, [], [])
