"""Scikit-learn style estimators wrapping the training loop: a U-Net lung
segmenter and a CNN classifier over the four block families. Both expose
fit/predict plus get_params/set_params so they compose with common tooling;
no scikit-learn import is required.
"""

from __future__ import annotations

import inspect
import math

import numpy as np

from . import engine
from .nets import ClassifierConfig, UNetConfig, build_classifier, build_unet
from .optim import (AdamState, EarlyStopState, ScheduleAction, SGDMomentumState, TrainConfig,
                    adam_step, schedule_update, sgd_momentum_step)


class NotFittedError(RuntimeError):
    pass


class _BaseEstimator:
    """Minimal get_params/set_params support, mirroring sklearn semantics."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p.name for p in sig.parameters.values() if p.name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"

    def _require_fitted(self):
        if getattr(self, "model_", None) is None:
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")


# ------------------------------------------------------------ input checking

def check_image_batch(X, channels: int) -> np.ndarray:
    """Coerce to float32 (N, C, H, W) in [0, 1]-ish range; uint8 input is
    scaled by 1/255. Rejects non-finite values and channel mismatches."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None, :, :]
    if X.ndim != 4:
        raise ValueError(f"expected (N, H, W) or (N, C, H, W) images, got shape {X.shape}")
    if X.shape[1] != channels:
        raise ValueError(f"expected {channels} channel(s), got {X.shape[1]}")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    else:
        X = X.astype(np.float32, copy=False)
        if not np.all(np.isfinite(X)):
            raise ValueError("image batch contains NaN or Inf")
    return X


def check_mask_batch(y, spatial_shape) -> np.ndarray:
    """Coerce segmentation targets to (N, H, W) {0, 1} int arrays."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"expected (N, H, W) masks, got shape {y.shape}")
    if y.shape[1:] != tuple(spatial_shape):
        raise ValueError(f"mask spatial dims {y.shape[1:]} != image dims {tuple(spatial_shape)}")
    binary = (y > 0).astype(np.int64)
    return binary


def check_labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"expected 1-d label array, got shape {y.shape}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def _split_validation(n: int, seed: int):
    """Hold out 20% of the training items for validation."""
    rng = np.random.default_rng([abs(int(seed)), 0x5A11])
    order = rng.permutation(n)
    n_val = int(round(0.2 * n))
    if n_val == 0 or n - n_val == 0:
        return np.arange(n), np.arange(n)  # degenerate tiny set: validate on train
    return order[n_val:], order[:n_val]


# ------------------------------------------------------------- training loop

EVAL_BATCH = 32  # eval-mode outputs are per-sample, so batching is free throughput


def _eval_loss(model, X, targets, batch_size: int = EVAL_BATCH) -> float:
    total, sites = 0.0, 0
    with engine.no_grad():
        for i in range(0, len(X), batch_size):
            xb = X[i:i + batch_size]
            tb = targets[i:i + batch_size]
            out = model.forward(xb, train=False)
            total += engine.cross_entropy(out, tb).item()
            sites += tb.size // tb.shape[1]
    return total / max(sites, 1)


def fit_network(model, X, targets, X_val, val_targets, cfg: TrainConfig,
                optimizer: str = "sgd"):
    """Mini-batch training with the drop-LR/early-stop schedule; restores the
    best-validation snapshot before returning.

    Returns (history, best_val_loss, best_epoch); history rows are dicts with
    epoch, train_loss, val_loss, lr and the schedule action.
    """
    params = [t for _, t in model.named_params()]
    datas = [p.data for p in params]
    if optimizer == "adam":
        opt_state = AdamState.for_params(datas)
    elif optimizer == "sgd":
        opt_state = SGDMomentumState.for_params(datas)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")

    rng = np.random.default_rng([abs(int(cfg.seed)), 0x7F17])
    lr = cfg.learning_rate
    stop = EarlyStopState()
    best_val = math.inf
    best_epoch = 0
    best_snapshot = model.snapshot()
    history = []
    n = len(X)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        run_loss, run_sites = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb = X[idx]
            tb = targets[idx]
            out = model.forward(xb, train=True)
            sites = tb.size // tb.shape[1]
            loss = engine.scale(engine.cross_entropy(out, tb), 1.0 / sites)
            val = loss.item()
            if not math.isfinite(val):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, batch {i // cfg.batch_size} "
                    f"(lr={lr:g}); aborting")
            for p in params:
                p.zero_grad()
            engine.backward(loss)
            grads = [p.grad for p in params]
            if optimizer == "adam":
                adam_step(datas, grads, opt_state, lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
            else:
                sgd_momentum_step(datas, grads, opt_state, lr, beta=cfg.momentum_beta)
            run_loss += val * sites
            run_sites += sites
        val_loss = _eval_loss(model, X_val, val_targets)
        action = schedule_update(stop, val_loss, cfg)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snapshot = model.snapshot()
        history.append({"epoch": epoch, "train_loss": run_loss / max(run_sites, 1),
                        "val_loss": val_loss, "lr": lr, "action": action.value})
        if action is ScheduleAction.DROP_LR:
            lr *= cfg.lr_drop_factor
        elif action is ScheduleAction.STOP:
            break
    model.restore(best_snapshot)
    return history, best_val, best_epoch


def _predict_batched(model, X, batch_size: int = EVAL_BATCH) -> np.ndarray:
    outs = []
    with engine.no_grad():
        for i in range(0, len(X), batch_size):
            outs.append(model.forward(X[i:i + batch_size], train=False).data.copy())
    return np.concatenate(outs, axis=0)


# ----------------------------------------------------------------- segmenter

class UNetSegmenter(_BaseEstimator):
    """Binary lung segmenter: fit on images plus masks, predict {0, 255}
    masks. Trains with Adam and pixel-wise cross-entropy."""

    def __init__(self, in_channels: int = 1, base_channels: int = 16, depth: int = 4,
                 learning_rate: float = 1e-3, adam_beta1: float = 0.9,
                 adam_beta2: float = 0.999, batch_size: int = 4, max_epochs: int = 50,
                 lr_drop_factor: float = 0.1, lr_patience: int = 3, stop_patience: int = 6,
                 seed: int = 0):
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.depth = depth
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lr_drop_factor = lr_drop_factor
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.seed = seed
        self.model_ = None

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate,
                           adam_betas=(self.adam_beta1, self.adam_beta2),
                           batch_size=self.batch_size, max_epochs=self.max_epochs,
                           lr_drop_factor=self.lr_drop_factor, lr_patience=self.lr_patience,
                           stop_patience=self.stop_patience, seed=self.seed)

    @staticmethod
    def _targets(masks: np.ndarray) -> np.ndarray:
        fg = masks.astype(np.float32)
        return np.stack([1.0 - fg, fg], axis=1)  # channel 1 is the lung class

    def fit(self, X, y, validation=None):
        X = check_image_batch(X, self.in_channels)
        y = check_mask_batch(y, X.shape[2:])
        if validation is None:
            tr, va = _split_validation(len(X), self.seed)
            X_val, y_val = X[va], y[va]
            X, y = X[tr], y[tr]
        else:
            X_val = check_image_batch(validation[0], self.in_channels)
            y_val = check_mask_batch(validation[1], X_val.shape[2:])
        self.model_ = build_unet(UNetConfig(in_channels=self.in_channels,
                                            base_channels=self.base_channels,
                                            depth=self.depth, seed=self.seed))
        self.history_, self.best_val_loss_, self.best_epoch_ = fit_network(
            self.model_, X, self._targets(y), X_val, self._targets(y_val),
            self._train_config(), optimizer="adam")
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities, shape (N, 2, H, W)."""
        self._require_fitted()
        X = check_image_batch(X, self.in_channels)
        return _predict_batched(self.model_, X)

    def predict(self, X) -> np.ndarray:
        """Binary masks with the PGM convention {0, 255}."""
        proba = self.predict_proba(X)
        return np.where(proba[:, 1] >= 0.5, 255, 0).astype(np.uint8)

    def score(self, X, y) -> float:
        """Intersection-over-union of predictions against reference masks."""
        from .metrics import PixelConfusion, seg_metrics

        pred = self.predict(X)
        y = check_mask_batch(y, pred.shape[1:])
        pc = PixelConfusion()
        for p, t in zip(pred, y):
            pc.add(PixelConfusion.from_masks(p, t))
        return seg_metrics(pc)["iou"]


# ---------------------------------------------------------------- classifier

class CNNClassifier(_BaseEstimator):
    """Three-way (by default) image classifier over one of the reduced-scale
    block families: fire, residual, inception or dense."""

    def __init__(self, family: str = "fire", in_channels: int = 1, n_classes: int = 3,
                 width: int = 16, blocks: int = 3, optimizer: str = "sgd",
                 learning_rate: float = 1e-3, momentum: float = 0.9,
                 adam_beta1: float = 0.9, adam_beta2: float = 0.999, batch_size: int = 4,
                 max_epochs: int = 20, lr_drop_factor: float = 0.1, lr_patience: int = 3,
                 stop_patience: int = 6, seed: int = 0):
        self.family = family
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.width = width
        self.blocks = blocks
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lr_drop_factor = lr_drop_factor
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.seed = seed
        self.model_ = None

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, momentum_beta=self.momentum,
                           adam_betas=(self.adam_beta1, self.adam_beta2),
                           batch_size=self.batch_size, max_epochs=self.max_epochs,
                           lr_drop_factor=self.lr_drop_factor, lr_patience=self.lr_patience,
                           stop_patience=self.stop_patience, seed=self.seed)

    def _targets(self, y: np.ndarray) -> np.ndarray:
        onehot = np.zeros((y.size, self.n_classes), dtype=np.float32)
        onehot[np.arange(y.size), y] = 1.0
        return onehot

    def fit(self, X, y, validation=None):
        X = check_image_batch(X, self.in_channels)
        y = check_labels(y, self.n_classes)
        if len(X) != len(y):
            raise ValueError("X and y lengths differ")
        if validation is None:
            tr, va = _split_validation(len(X), self.seed)
            X_val, y_val = X[va], y[va]
            X, y = X[tr], y[tr]
        else:
            X_val = check_image_batch(validation[0], self.in_channels)
            y_val = check_labels(validation[1], self.n_classes)
        self.model_ = build_classifier(ClassifierConfig(
            family=self.family, in_channels=self.in_channels, n_classes=self.n_classes,
            width=self.width, blocks=self.blocks, seed=self.seed))
        self.classes_ = np.arange(self.n_classes)
        self.history_, self.best_val_loss_, self.best_epoch_ = fit_network(
            self.model_, X, self._targets(y), X_val, self._targets(y_val),
            self._train_config(), optimizer=self.optimizer)
        return self

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        X = check_image_batch(X, self.in_channels)
        return _predict_batched(self.model_, X)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y) -> float:
        y = check_labels(y, self.n_classes)
        return float(np.mean(self.predict(X) == y))
