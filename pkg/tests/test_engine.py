import numpy as np
import pytest

from cxrpipe import engine
from cxrpipe.engine import tensor


def t(data, rg=False):
    return tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


# ------------------------------------------------------------------- tensors

def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        tensor([np.inf])


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    a = engine.conv2d(t(x), t(w), padding=1).data
    b = engine.conv2d(t(x), t(w), padding=1).data
    assert np.array_equal(a, b)


# -------------------------------------------------------------- convolution

def test_conv2d_scalar_kernel_scales():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = engine.conv2d(x, t([[[[2.0]]]]), t([0.0]))
    assert out.data.reshape(-1).tolist() == [2, 4, 6, 8]


def test_conv2d_allones_kernel_sums():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = engine.conv2d(x, t(np.ones((1, 1, 2, 2))), t([0.0]))
    assert out.data.reshape(-1).tolist() == [10.0]


def test_conv2d_identity_kernel_with_padding():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = engine.conv2d(x, t(k), padding=1)
    assert np.array_equal(out.data, x.data)


def test_conv2d_shape_errors():
    x = t(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        engine.conv2d(x, t(np.zeros((1, 3, 3, 3))))  # channel mismatch
    with pytest.raises(ValueError):
        engine.conv2d(x, t(np.zeros((1, 2, 3, 3))), stride=2)  # non-integer dims
    with pytest.raises(ValueError):
        engine.conv2d(x, t(np.zeros((1, 2, 3, 3))), t(np.zeros(2)))  # bias length


def test_conv_transpose_broadcast_and_shape_law(rng):
    out = engine.conv_transpose2d(t([[[[5.0]]]]), t(np.ones((1, 1, 2, 2))), stride=2)
    assert np.all(out.data == 5.0)
    assert out.shape == (1, 1, 2, 2)
    x = t(rng.standard_normal((1, 2, 8, 8)))
    w = t(rng.standard_normal((2, 3, 2, 2)))
    assert engine.conv_transpose2d(x, w, stride=2).shape == (1, 3, 16, 16)


def test_conv_adjoint_identity(rng):
    # <conv(x, w), y> == <x, conv_transpose(y, w)> on 64-bit data
    for _ in range(5):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        y = rng.standard_normal((2, 4, 5, 5))
        lhs = (engine.conv2d(t(x), t(w)).data * y).sum()
        rhs = (x * engine.conv_transpose2d(t(y), t(w)).data).sum()
        assert abs(lhs - rhs) < 1e-10


# ------------------------------------------------------------------ pooling

def test_pool_examples():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert engine.maxpool2d(x, 2, 2).data.reshape(-1).tolist() == [4.0]
    assert engine.avgpool2d(x, 2, 2).data.reshape(-1).tolist() == [2.5]
    c = t(np.full((1, 3, 5, 5), 7.0))
    out = engine.global_avgpool(c)
    assert out.shape == (1, 3, 1, 1)
    assert np.allclose(out.data, 7.0)


def test_pool_window_too_large():
    with pytest.raises(ValueError):
        engine.maxpool2d(t(np.zeros((1, 1, 2, 2))), 3, 1)


def test_maxpool_overlapping_backward(rng):
    x = tensor(rng.permutation(16).reshape(1, 1, 4, 4).astype(np.float64), requires_grad=True)
    out = engine.maxpool2d(x, 2, 1)
    engine.backward(engine.sum_all(out))
    assert x.grad.sum() == out.data.size  # each window routes one unit of gradient


# ---------------------------------------------------------------- batchnorm

def test_batchnorm_train_normalizes(rng):
    x = tensor(rng.standard_normal((8, 3, 6, 6)) * 100.0)
    gamma, beta = t(np.ones(3)), t(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    out = engine.batchnorm2d(x, gamma, beta, rm, rv, train=True)
    mean = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    assert np.all(np.abs(mean) < 1e-6)
    assert np.all(np.abs(var - 1.0) < 1e-6)
    assert not np.allclose(rm, 0.0)  # running stats updated


def test_batchnorm_gamma_zero_gives_beta(rng):
    x = tensor(rng.standard_normal((2, 3, 4, 4)))
    out = engine.batchnorm2d(x, t(np.zeros(3)), t(np.full(3, 1.5)), np.zeros(3), np.ones(3),
                             train=True)
    assert np.allclose(out.data, 1.5)


def test_batchnorm_eval_affine(rng):
    x = tensor(rng.standard_normal((2, 3, 4, 4)))
    gamma = t(np.array([2.0, 3.0, 4.0]))
    beta = t(np.array([0.5, -0.5, 0.0]))
    out = engine.batchnorm2d(x, gamma, beta, np.zeros(3), np.ones(3), train=False, eps=0.0)
    expect = gamma.data[None, :, None, None] * x.data + beta.data[None, :, None, None]
    assert np.allclose(out.data, expect, atol=1e-12)


def test_batchnorm_channel_mismatch():
    x = tensor(np.zeros((1, 3, 2, 2)))
    with pytest.raises(ValueError):
        engine.batchnorm2d(x, t(np.ones(2)), t(np.zeros(3)), np.zeros(3), np.ones(3), train=True)


# ------------------------------------------------------------ softmax / loss

def test_softmax_symmetry_and_closed_form():
    out = engine.softmax(t([[0.0, 0.0, 0.0]]), axis=-1)
    assert np.allclose(out.data, 1.0 / 3.0)
    out = engine.softmax(t([[np.log(2.0), 0.0, 0.0]]), axis=-1)
    assert np.allclose(out.data, [0.5, 0.25, 0.25])


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal((4, 5))
    a = engine.softmax(t(x), axis=-1).data
    b = engine.softmax(t(x + 123.456), axis=-1).data
    assert np.allclose(a, b, atol=1e-12)
    assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all((a > 0) & (a < 1))


def test_cross_entropy_matches_formula(rng):
    pred = np.abs(rng.standard_normal((3, 4))) + 0.1
    pred /= pred.sum(axis=1, keepdims=True)
    target = np.eye(4)[:3]
    loss = engine.cross_entropy(tensor(pred), target)
    assert np.isclose(loss.item(), -(target * np.log(pred + 1e-12)).sum())
    with pytest.raises(ValueError):
        engine.cross_entropy(tensor(pred), np.eye(4))


# ----------------------------------------------------------------- backward

def test_backward_conv_weight_gradient_is_input_sum():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = tensor(np.array([[[[2.0]]]]), requires_grad=True)
    loss = engine.sum_all(engine.conv2d(x, w))
    engine.backward(loss)
    assert w.grad.reshape(-1).tolist() == [10.0]


def test_backward_relu_indicator():
    x = tensor(np.array([-2.0, -0.5, 0.0, 0.5, 2.0]), requires_grad=True)
    engine.backward(engine.sum_all(engine.relu(x)))
    assert x.grad.tolist() == [0.0, 0.0, 0.0, 1.0, 1.0]  # subgradient at 0 is 0


def test_backward_accumulates_through_fanout(rng):
    x = tensor(rng.standard_normal((3, 3)), requires_grad=True)
    y = engine.add(x, x)
    engine.backward(engine.sum_all(y))
    assert np.allclose(x.grad, 2.0)


def test_backward_rejects_detached_and_non_scalar(rng):
    with pytest.raises(ValueError):
        engine.backward(tensor(np.array(1.0)))
    x = tensor(rng.standard_normal(4), requires_grad=True)
    with pytest.raises(ValueError):
        engine.backward(engine.relu(x))


def test_no_grad_disables_recording(rng):
    x = tensor(rng.standard_normal(4), requires_grad=True)
    with engine.no_grad():
        out = engine.relu(x)
        assert out._ctx is None and not out.requires_grad
    out = engine.relu(x)
    assert out._ctx is not None


def test_concat_and_split_gradients(rng):
    a = tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
    out = engine.concat([a, b], axis=1)
    assert out.shape == (1, 5, 3, 3)
    engine.backward(engine.sum_all(engine.scale(out, 2.0)))
    assert np.allclose(a.grad, 2.0) and np.allclose(b.grad, 2.0)


def test_linear_flattens_trailing_dims(rng):
    x = tensor(rng.standard_normal((2, 3, 1, 1)), requires_grad=True)
    w = tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = tensor(np.zeros(4), requires_grad=True)
    out = engine.linear(x, w, b)
    assert out.shape == (2, 4)
    engine.backward(engine.sum_all(out))
    assert x.grad.shape == x.shape
