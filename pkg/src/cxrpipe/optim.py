"""Parameter update rules (SGD with momentum, Adam) and the validation-loss
schedule: drop the learning rate after three stagnant epochs, stop after six.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the experimental protocol."""

    learning_rate: float = 1e-3
    momentum_beta: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 50
    lr_drop_factor: float = 0.1
    lr_patience: int = 3
    stop_patience: int = 6
    improve_threshold: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.lr_patience < 1 or self.stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if not 0.0 < self.lr_drop_factor < 1.0:
            raise ValueError("lr_drop_factor must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class EarlyStopState:
    best_val_loss: float = math.inf
    epochs_since_improve: int = 0
    lr_drops_applied: int = 0


class ScheduleAction(enum.Enum):
    CONTINUE = "continue"
    DROP_LR = "drop_lr"
    STOP = "stop"


def schedule_update(state: EarlyStopState, val_loss: float, config: TrainConfig) -> ScheduleAction:
    """Advance the early-stopping state with this epoch's validation loss."""
    if not math.isfinite(val_loss):
        raise ValueError(f"non-finite validation loss: {val_loss}")
    if val_loss <= state.best_val_loss - config.improve_threshold:
        state.best_val_loss = val_loss
        state.epochs_since_improve = 0
        return ScheduleAction.CONTINUE
    state.epochs_since_improve += 1
    if state.epochs_since_improve >= config.stop_patience:
        return ScheduleAction.STOP
    if state.epochs_since_improve == config.lr_patience:
        state.lr_drops_applied += 1
        return ScheduleAction.DROP_LR
    return ScheduleAction.CONTINUE


def _check_pairs(params, grads, state_arrays):
    if len(params) != len(grads) or len(params) != len(state_arrays):
        raise ValueError("params, grads and state must have equal length")
    for w, g in zip(params, grads):
        if w.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape}")


@dataclass
class SGDMomentumState:
    velocities: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params):
        return cls(velocities=[np.zeros_like(w) for w in params])


def sgd_momentum_step(params, grads, state: SGDMomentumState, lr: float, beta: float = 0.9):
    """Classic momentum: v <- beta*v + g, w <- w - lr*v. Updates in place."""
    _check_pairs(params, grads, state.velocities)
    for w, g, v in zip(params, grads, state.velocities):
        v *= beta
        v += g
        w -= lr * v
    return state


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(w) for w in params],
                   v=[np.zeros_like(w) for w in params])


def adam_step(params, grads, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam. Updates parameters and state in place."""
    _check_pairs(params, grads, state.m)
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for w, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= lr * (m / c1) / ((v / c2) ** 0.5 + eps)
    return state
