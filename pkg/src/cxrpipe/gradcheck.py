"""Central finite-difference verification for every differentiable engine op.

Each registered op gets randomized small-tensor trials in float64; the check
returns the worst relative error seen, deterministically for a given seed.
"""

from __future__ import annotations

import numpy as np

from . import engine


def _loss_of(out, rng):
    # project the op output onto a fixed random direction to get a scalar
    r = rng.standard_normal(out.shape)
    return lambda t: engine.sum_all(engine.scale(t, r)), r


def _case_conv2d(rng):
    while True:
        n, c, f = (int(rng.integers(1, 3)) for _ in range(3))
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, max(1, k // 2) + 1))
        oh, ow = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = (oh - 1) * s + k - 2 * p, (ow - 1) * s + k - 2 * p
        if h >= 1 and w >= 1:
            break
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((f, c, k, k))
    b = rng.standard_normal(f)
    r = rng.standard_normal((n, f, oh, ow))

    def fn(ts):
        out = engine.conv2d(ts[0], ts[1], ts[2], stride=s, padding=p)
        return engine.sum_all(engine.scale(out, r))

    return [x, wt, b], fn


def _case_conv_transpose2d(rng):
    n, ci, co = (int(rng.integers(1, 3)) for _ in range(3))
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, max(1, (k - 1) // 2) + 1)) if k > 1 else 0
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    oh, ow = (h - 1) * s + k - 2 * p, (w - 1) * s + k - 2 * p
    if oh < 1 or ow < 1:
        p = 0
        oh, ow = (h - 1) * s + k, (w - 1) * s + k
    x = rng.standard_normal((n, ci, h, w))
    wt = rng.standard_normal((ci, co, k, k))
    b = rng.standard_normal(co)
    r = rng.standard_normal((n, co, oh, ow))

    def fn(ts):
        out = engine.conv_transpose2d(ts[0], ts[1], ts[2], stride=s, padding=p)
        return engine.sum_all(engine.scale(out, r))

    return [x, wt, b], fn


def _case_maxpool2d(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(3, 6)), int(rng.integers(3, 6))
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    # distinct, well-separated values so the finite-difference step cannot
    # flip any window maximum (ties are excluded by construction)
    size = n * c * h * w
    x = (rng.permutation(size) * 0.05 + rng.normal(0, 1e-3, size)).reshape(n, c, h, w)
    win = (h - k) // s + 1, (w - k) // s + 1
    r = rng.standard_normal((n, c) + win)

    def fn(ts):
        return engine.sum_all(engine.scale(engine.maxpool2d(ts[0], k, s), r))

    return [x], fn


def _case_avgpool2d(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(3, 6)), int(rng.integers(3, 6))
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    x = rng.standard_normal((n, c, h, w))
    win = (h - k) // s + 1, (w - k) // s + 1
    r = rng.standard_normal((n, c) + win)

    def fn(ts):
        return engine.sum_all(engine.scale(engine.avgpool2d(ts[0], k, s), r))

    return [x], fn


def _case_global_avgpool(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    r = rng.standard_normal((2, 3, 1, 1))

    def fn(ts):
        return engine.sum_all(engine.scale(engine.global_avgpool(ts[0]), r))

    return [x], fn


def _bn_case(rng, train):
    n, c = int(rng.integers(2, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x = rng.standard_normal((n, c, h, w))
    gamma = 1.0 + 0.5 * rng.standard_normal(c)
    beta = 0.3 * rng.standard_normal(c)
    rm = 0.2 * rng.standard_normal(c)
    rv = 0.5 + np.abs(rng.standard_normal(c))
    r = rng.standard_normal((n, c, h, w))

    def fn(ts):
        out = engine.batchnorm2d(ts[0], ts[1], ts[2], rm.copy(), rv.copy(), train=train)
        return engine.sum_all(engine.scale(out, r))

    return [x, gamma, beta], fn


def _case_batchnorm2d_train(rng):
    return _bn_case(rng, train=True)


def _case_batchnorm2d_eval(rng):
    return _bn_case(rng, train=False)


def _case_relu(rng):
    x = rng.standard_normal((3, 4))
    x = np.sign(x) * (np.abs(x) + 0.05)  # keep inputs away from the kink
    r = rng.standard_normal(x.shape)

    def fn(ts):
        return engine.sum_all(engine.scale(engine.relu(ts[0]), r))

    return [x], fn


def _case_linear(rng):
    n, d, f = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
    x = rng.standard_normal((n, d))
    w = rng.standard_normal((f, d))
    b = rng.standard_normal(f)
    r = rng.standard_normal((n, f))

    def fn(ts):
        return engine.sum_all(engine.scale(engine.linear(ts[0], ts[1], ts[2]), r))

    return [x, w, b], fn


def _case_softmax(rng):
    x = rng.standard_normal((3, 5))
    r = rng.standard_normal(x.shape)

    def fn(ts):
        return engine.sum_all(engine.scale(engine.softmax(ts[0], axis=-1), r))

    return [x], fn


def _case_cross_entropy(rng):
    n, c = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    z = rng.standard_normal((n, c))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    pred = 0.9 * e / e.sum(axis=1, keepdims=True) + 0.1 / c
    target = np.zeros((n, c))
    target[np.arange(n), rng.integers(0, c, n)] = 1.0

    def fn(ts):
        return engine.cross_entropy(ts[0], target)

    return [pred], fn


def _case_concat(rng):
    n, h, w = 2, 3, 3
    a = rng.standard_normal((n, 2, h, w))
    b = rng.standard_normal((n, 3, h, w))
    r = rng.standard_normal((n, 5, h, w))

    def fn(ts):
        return engine.sum_all(engine.scale(engine.concat(ts, axis=1), r))

    return [a, b], fn


def _case_add(rng):
    a = rng.standard_normal((2, 3, 2, 2))
    b = rng.standard_normal((2, 3, 2, 2))
    r = rng.standard_normal(a.shape)

    def fn(ts):
        return engine.sum_all(engine.scale(engine.add(ts[0], ts[1]), r))

    return [a, b], fn


def _case_mul(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    r = rng.standard_normal(a.shape)

    def fn(ts):
        return engine.sum_all(engine.scale(engine.mul(ts[0], ts[1]), r))

    return [a, b], fn


REGISTRY = {
    "conv2d": _case_conv2d,
    "conv_transpose2d": _case_conv_transpose2d,
    "maxpool2d": _case_maxpool2d,
    "avgpool2d": _case_avgpool2d,
    "global_avgpool": _case_global_avgpool,
    "batchnorm2d_train": _case_batchnorm2d_train,
    "batchnorm2d_eval": _case_batchnorm2d_eval,
    "relu": _case_relu,
    "linear": _case_linear,
    "softmax": _case_softmax,
    "cross_entropy": _case_cross_entropy,
    "concat": _case_concat,
    "add": _case_add,
    "mul": _case_mul,
}


def registered_ops() -> tuple:
    return tuple(REGISTRY)


def default_tolerance(opname: str) -> float:
    # train-mode batch norm couples every sample through the batch statistics
    return 1e-3 if opname == "batchnorm2d_train" else 1e-4


def grad_check(opname: str, trials: int = 20, eps: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients
    across `trials` randomized cases of the op."""
    if opname not in REGISTRY:
        raise ValueError(f"unknown op {opname!r}; registered: {sorted(REGISTRY)}")
    case = REGISTRY[opname]
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([abs(int(seed)), trial, 0xFD])
        arrays, fn = case(rng)
        tensors = [engine.tensor(a, requires_grad=True) for a in arrays]
        loss = fn(tensors)
        engine.backward(loss)
        analytic = [t.grad.copy() for t in tensors]
        with engine.no_grad():
            for ai, arr in enumerate(arrays):
                flat = arr.reshape(-1)
                aflat = analytic[ai].reshape(-1)
                for idx in range(flat.size):
                    orig = flat[idx]
                    flat[idx] = orig + eps
                    lp = fn([engine.Tensor(a) for a in arrays]).item()
                    flat[idx] = orig - eps
                    lm = fn([engine.Tensor(a) for a in arrays]).item()
                    flat[idx] = orig
                    fd = (lp - lm) / (2.0 * eps)
                    rel = abs(aflat[idx] - fd) / max(abs(aflat[idx]) + abs(fd), 1.0)
                    worst = max(worst, rel)
    return worst
