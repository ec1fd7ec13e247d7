import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeshield.errors import ConfigurationError, DimensionError
from spikeshield.layers import Parameter
from spikeshield.optim import Adam, AdamState, adam_step, check_milestones, lr_at


def test_zero_gradient_is_fixed_point():
    p = Parameter(np.array([0.3, -1.2, 5.0]))
    before = p.data.copy()
    state = AdamState.zeros([p])
    for _ in range(5):
        adam_step([p], [np.zeros(3, dtype=np.float32)], state, 1e-2)
    np.testing.assert_array_equal(p.data, before)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 10.0), st.sampled_from([-1.0, 1.0]), st.floats(1e-5, 1e-1))
def test_first_step_closed_form(mag, sign, lr):
    # t = 1: m_hat = g and v_hat = g^2, so the step is lr * |g| / (|g| + eps)
    g = sign * mag
    p = Parameter(np.zeros(1))
    p.data = p.data.astype(np.float64)
    state = AdamState.zeros([p])
    adam_step([p], [np.array([g])], state, lr)
    expected = lr * mag / (mag + 1e-8)
    assert abs(p.data[0]) == pytest.approx(expected, rel=1e-9)
    assert np.sign(p.data[0]) == -sign


def test_second_step_hand_value():
    p = Parameter(np.zeros(1))
    p.data = p.data.astype(np.float64)
    state = AdamState.zeros([p])
    adam_step([p], [np.array([1.0])], state, 0.1)
    adam_step([p], [np.array([3.0])], state, 0.1)
    m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
    v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    expected = -0.1 / (1 + 1e-8) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p.data[0] == pytest.approx(expected, rel=1e-12)


def test_adam_determinism():
    def run():
        rng = np.random.default_rng(4)
        p = Parameter(rng.normal(size=(3, 3)))
        opt = Adam([p], lr=1e-2)
        for _ in range(20):
            p.grad = (2 * p.data + rng.normal(size=(3, 3))).astype(np.float32)
            opt.step()
        return p.data.copy()

    assert run().tobytes() == run().tobytes()


def test_adam_minimises_quadratic():
    p = Parameter(np.array([3.0, -2.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        p.grad = 2 * p.data
        opt.step()
    assert np.abs(p.data).max() < 0.05


def test_adam_none_grad_and_errors():
    p = Parameter(np.ones(2))
    state = AdamState.zeros([p])
    adam_step([p], [None], state, 0.1)
    np.testing.assert_array_equal(p.data, 1.0)
    with pytest.raises(DimensionError):
        adam_step([p], [np.ones(3)], state, 0.1)
    with pytest.raises(ConfigurationError):
        Adam([p], lr=0.0)


def test_paper_schedule_step_function():
    assert [lr_at(e, 1e-4, (30, 60)) for e in (1, 30, 31, 60, 61, 75)] == \
        [1e-4, 1e-4, 1e-5, 1e-5, 1e-6, 1e-6]


def test_schedule_is_monotone():
    lrs = [lr_at(e, 1e-3, (10, 20)) for e in range(1, 26)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lr_at(5, 1e-3, ()) == 1e-3


def test_milestone_validation():
    check_milestones((30, 60), 75)
    for bad in ((60, 30), (30, 30), (0, 5), (10, 80)):
        with pytest.raises(ConfigurationError):
            check_milestones(bad, 75)
    with pytest.raises(ConfigurationError):
        lr_at(0, 1e-3, ())
