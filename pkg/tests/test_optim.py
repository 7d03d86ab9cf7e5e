import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrpipe.optim import (AdamState, EarlyStopState, ScheduleAction, SGDMomentumState,
                           TrainConfig, adam_step, schedule_update, sgd_momentum_step)


def one_param(value=0.0):
    p = [np.array([value])]
    return p


# -------------------------------------------------------------- sgd momentum

def test_sgd_momentum_hand_example():
    w = one_param(0.0)
    state = SGDMomentumState.for_params(w)
    sgd_momentum_step(w, [np.array([1.0])], state, lr=0.1, beta=0.9)
    assert np.isclose(w[0][0], -0.1)
    sgd_momentum_step(w, [np.array([1.0])], state, lr=0.1, beta=0.9)
    assert np.isclose(state.velocities[0][0], 1.9)
    assert np.isclose(w[0][0], -0.29)


def test_sgd_zero_lr_freezes_parameters(rng):
    w = [rng.standard_normal((3, 3))]
    before = w[0].copy()
    state = SGDMomentumState.for_params(w)
    for _ in range(5):
        sgd_momentum_step(w, [rng.standard_normal((3, 3))], state, lr=0.0, beta=0.9)
    assert np.array_equal(w[0], before)


def test_sgd_beta_zero_is_plain_sgd(rng):
    g = rng.standard_normal(4)
    w = [np.zeros(4)]
    sgd_momentum_step(w, [g], SGDMomentumState.for_params(w), lr=0.5, beta=0.0)
    assert np.allclose(w[0], -0.5 * g)


def test_sgd_shape_mismatch():
    w = one_param()
    with pytest.raises(ValueError):
        sgd_momentum_step(w, [np.zeros(2)], SGDMomentumState.for_params(w), lr=0.1)


# --------------------------------------------------------------------- adam

def test_adam_first_step_hand_example():
    w = one_param(0.0)
    state = AdamState.for_params(w)
    adam_step(w, [np.array([1.0])], state, lr=1e-3)
    assert np.isclose(state.m[0][0], 0.1)
    assert np.isclose(state.v[0][0], 0.001)
    assert np.isclose(w[0][0], -1e-3, atol=1e-9)


def test_adam_zero_gradient_keeps_parameter():
    w = one_param(0.7)
    adam_step(w, [np.array([0.0])], AdamState.for_params(w), lr=1e-3)
    assert w[0][0] == 0.7


def test_adam_constant_gradient_step_size_approaches_lr():
    # with constant gradients bias correction saturates and |dw| -> lr
    w = one_param(0.0)
    state = AdamState.for_params(w)
    lr = 1e-3
    prev = w[0][0]
    for _ in range(1000):
        prev = w[0][0]
        adam_step(w, [np.array([2.5])], state, lr=lr)
    assert abs(abs(w[0][0] - prev) - lr) < 1e-6


# ----------------------------------------------------------------- schedule

def test_schedule_continues_on_improvement():
    cfg = TrainConfig()
    state = EarlyStopState()
    for loss in (1.0, 0.9, 0.8):
        assert schedule_update(state, loss, cfg) is ScheduleAction.CONTINUE
    assert state.best_val_loss == 0.8


def test_schedule_stops_after_six_stagnant_epochs():
    cfg = TrainConfig()
    state = EarlyStopState()
    schedule_update(state, 1.0, cfg)
    actions = [schedule_update(state, 1.0, cfg) for _ in range(6)]
    assert actions[:2] == [ScheduleAction.CONTINUE, ScheduleAction.CONTINUE]
    assert actions[2] is ScheduleAction.DROP_LR  # third stagnant epoch
    assert actions[3:5] == [ScheduleAction.CONTINUE, ScheduleAction.CONTINUE]
    assert actions[5] is ScheduleAction.STOP  # sixth stagnant epoch


def test_schedule_improvement_threshold_is_absolute():
    cfg = TrainConfig()
    state = EarlyStopState()
    schedule_update(state, 1.0, cfg)
    # a decrease smaller than 1e-6 does not count as improvement
    schedule_update(state, 1.0 - 1e-9, cfg)
    assert state.epochs_since_improve == 1


def test_schedule_rejects_non_finite_loss():
    with pytest.raises(ValueError):
        schedule_update(EarlyStopState(), float("nan"), TrainConfig())


@given(st.lists(st.floats(min_value=0.01, max_value=10.0, allow_nan=False), min_size=1,
                max_size=40))
@settings(max_examples=60, deadline=None)
def test_schedule_always_stops_within_patience_of_last_improvement(losses):
    cfg = TrainConfig()
    state = EarlyStopState()
    stagnant = 0
    for loss in losses:
        action = schedule_update(state, loss, cfg)
        stagnant = 0 if state.epochs_since_improve == 0 else stagnant + 1
        assert stagnant <= cfg.stop_patience
        if stagnant == cfg.stop_patience:
            assert action is ScheduleAction.STOP
            break


# -------------------------------------------------------------- train config

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_patience=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_drop_factor=1.5)
    cfg = TrainConfig()
    assert cfg.batch_size == 4 and cfg.lr_patience == 3 and cfg.stop_patience == 6
