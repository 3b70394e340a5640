import numpy as np
import pytest

from kindiff.errors import DimensionError, NumericFailure
from kindiff.optim import OptimizerState, grads_for, optimizer_step
from kindiff.tensor import Tensor


def make_param(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


def test_zero_gradient_zero_decay_leaves_params():
    p = make_param([1.0, -2.0])
    state = OptimizerState(weight_decay=0.0).init_for([p])
    optimizer_step([p], [np.zeros(2)], state)
    assert np.array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_first_step_magnitude_matches_hand_evaluation():
    # g=1, lr=0.1, wd=0: bias correction makes mhat/sqrt(vhat) = 1, so the
    # parameter moves by lr up to eps rounding
    p = make_param([0.0])
    state = OptimizerState(lr=0.1, weight_decay=0.0).init_for([p])
    optimizer_step([p], [np.ones(1)], state)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-8)


def test_decoupled_decay_scales_param():
    p = make_param([2.0])
    state = OptimizerState(lr=0.1, weight_decay=0.01).init_for([p])
    optimizer_step([p], [np.zeros(1)], state)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), rel=1e-15)


def test_step_count_strictly_increases():
    p = make_param([0.0])
    state = OptimizerState().init_for([p])
    for expected in (1, 2, 3):
        optimizer_step([p], [np.ones(1)], state)
        assert state.step == expected


def test_nonfinite_gradient_rejected_without_mutation():
    p = make_param([1.0])
    state = OptimizerState().init_for([p])
    with pytest.raises(NumericFailure):
        optimizer_step([p], [np.array([np.nan])], state)
    assert state.step == 0
    assert p.data[0] == 1.0


def test_shape_mismatch_raises():
    p = make_param([1.0, 2.0])
    state = OptimizerState().init_for([p])
    with pytest.raises(DimensionError):
        optimizer_step([p], [np.zeros(3)], state)


def test_matches_reference_adamw_trajectory():
    # independent oracle: textbook update formulas evaluated step by step
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(5)
    p = make_param(theta.copy())
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.04
    state = OptimizerState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
    state.init_for([p])
    m = np.zeros(5)
    v = np.zeros(5)
    ref = theta.copy()
    for t in range(1, 6):
        g = rng.standard_normal(5)
        optimizer_step([p], [g.copy()], state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        ref = ref - lr * wd * ref - lr * mhat / (np.sqrt(vhat) + eps)
        assert np.allclose(p.data, ref, rtol=0, atol=1e-15)


def test_grads_for_fills_zeros():
    p = make_param([1.0])
    q = make_param([2.0])
    (p * 3.0).backward()
    gp, gq = grads_for([p, q])
    assert gp[0] == 3.0 and gq[0] == 0.0
