import numpy as np
import pytest

from cxrpipe import engine, saliency
from cxrpipe.nets import ClassifierConfig, LayerNode, ModelGraph, build_classifier
from cxrpipe.saliency import (combine_maps, grad_cam, mass_inside, score_cam,
                              score_cam_weights, upsample_normalize, write_saliency)


class HalfSplitModel:
    """Hand-checkable stand-in: logit = sum(left half) - sum(right half),
    tap activations are the two binary half masks."""

    in_channels = 1
    logits_name = "head"

    def __init__(self, size=4):
        self.size = size
        half = size // 2
        m1 = np.zeros((size, size), dtype=np.float64)
        m1[:, :half] = 1.0
        m2 = 1.0 - m1
        self.maps = np.stack([m1, m2])

    def last_conv_name(self):
        return "maps"

    def forward(self, x, train=False, taps=(), inject=None):
        x = np.asarray(x.data if isinstance(x, engine.Tensor) else x)
        half = self.size // 2
        score = x[:, 0, :, :half].sum(axis=(1, 2)) - x[:, 0, :, half:].sum(axis=(1, 2))
        logits = engine.Tensor(score[:, None])
        acts = {"maps": engine.Tensor(np.broadcast_to(self.maps, (x.shape[0],) + self.maps.shape)),
                "head": logits}
        if taps:
            return logits, {t: acts[t] for t in taps}
        return logits


# ------------------------------------------------------- upsample_normalize

def test_upsample_normalize_identity_range():
    m = np.array([[0.0, 1.0], [0.25, 0.75]])
    out = upsample_normalize(m, 2, 2)
    assert np.array_equal(out, m)


def test_upsample_normalize_constant_goes_to_zero():
    out = upsample_normalize(np.full((3, 3), 5.0), 6, 6)
    assert np.array_equal(out, np.zeros((6, 6)))


def test_upsample_normalize_monotone_columns():
    m = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = upsample_normalize(m, 2, 4)
    for row in out:
        assert np.all(np.diff(row) >= 0)
    assert out[0, 0] == 0.0 and out[0, -1] == 1.0


def test_upsample_normalize_rejects_downscale():
    with pytest.raises(ValueError):
        upsample_normalize(np.zeros((4, 4)), 2, 8)


# ------------------------------------------------------------------ gradcam

def _sum_map_model():
    """1x1-conv model: logit_c = global sum of the single feature map times
    the head weight; tap 'conv' holds the map itself."""
    nodes = [
        LayerNode("conv", "conv2d", ["input"], {"in_ch": 1, "out_ch": 1, "k": 1,
                                                "stride": 1, "padding": 0}),
        LayerNode("gap", "global_avgpool", ["conv"]),
        LayerNode("head", "linear", ["gap"], {"in_features": 1, "out_features": 2}),
        LayerNode("probs", "softmax", ["head"], {"axis": -1}),
    ]
    g = ModelGraph(nodes, in_channels=1, logits_name="head", meta={"spatial_divisor": 1})
    g.init_params(0)
    g.node("conv").params["w"].data[...] = 1.0
    g.node("conv").params["b"].data[...] = 0.0
    g.node("head").params["w"].data[...] = np.array([[1.0], [-1.0]], dtype=np.float32)
    g.node("head").params["b"].data[...] = 0.0
    return g


def test_grad_cam_unit_weight_recovers_relu_activation(rng):
    model = _sum_map_model()
    x = rng.random((1, 6, 6)).astype(np.float32)
    out = grad_cam(model, x, target_class=0, tap="conv")
    # d logit0 / d A = const > 0 everywhere -> map is A, max-normalized
    expect = x[0] / x[0].max()
    assert np.allclose(out.values, expect, atol=1e-6)


def test_grad_cam_negative_weighting_gives_zero_map(rng):
    model = _sum_map_model()
    x = rng.random((1, 6, 6)).astype(np.float32)
    out = grad_cam(model, x, target_class=1, tap="conv")  # head weight -1
    assert np.array_equal(out.values, np.zeros((6, 6)))


def test_grad_cam_alpha_matches_finite_difference(rng):
    # constructed 2-layer model: conv tap -> gap -> linear logits
    model = build_classifier(ClassifierConfig(family="fire", width=8, blocks=1, seed=3))
    x = rng.random((1, 32, 32)).astype(np.float32)
    tap = model.last_conv_name()
    x4 = x[None]
    _, acts = model.forward(x4, taps=(tap, model.logits_name))
    a0 = acts[tap]
    onehot = np.zeros(acts[model.logits_name].shape, dtype=np.float32)
    onehot[0, 1] = 1.0
    engine.backward(engine.sum_all(engine.scale(acts[model.logits_name], onehot)))
    analytic = a0.grad[0]

    def logit_with(tap_value):
        _, t = model.forward(x4, taps=(model.logits_name,),
                             inject={tap: tap_value.astype(np.float32)})
        return float(t[model.logits_name].data[0, 1])

    eps = 1e-2  # float32 forward; balanced step
    k, h, w = analytic.shape
    worst = 0.0
    rng2 = np.random.default_rng(0)
    for _ in range(12):
        ki, hi, wi = rng2.integers(0, k), rng2.integers(0, h), rng2.integers(0, w)
        plus = a0.data.copy()
        plus[0, ki, hi, wi] += eps
        minus = a0.data.copy()
        minus[0, ki, hi, wi] -= eps
        fd = (logit_with(plus) - logit_with(minus)) / (2 * eps)
        rel = abs(fd - analytic[ki, hi, wi]) / max(abs(fd) + abs(analytic[ki, hi, wi]), 1.0)
        worst = max(worst, rel)
    assert worst < 1e-2  # float32 arithmetic bound; the 64-bit check lives in acceptance


def test_grad_cam_unknown_tap_rejected(rng):
    model = _sum_map_model()
    with pytest.raises(KeyError):
        grad_cam(model, rng.random((1, 4, 4)).astype(np.float32), 0, tap="nope")


# ----------------------------------------------------------------- scorecam

def test_score_cam_half_split_hand_example():
    model = HalfSplitModel(size=4)
    x = np.ones((1, 4, 4), dtype=np.float32)
    out = score_cam(model, x, target_class=0, tap="maps")
    # f(X)=0, alpha1=+8, alpha2=-8: left half positive (normalized to 1), right zero
    assert np.all(out.values[:, :2] == 1.0)
    assert np.all(out.values[:, 2:] == 0.0)


def test_score_cam_all_ones_mask_contributes_nothing():
    def forward_scores(batch):
        return batch.sum(axis=(1, 2, 3))

    x = np.full((1, 1, 4, 4), 2.0, dtype=np.float32)
    acts = np.ones((1, 4, 4))
    alphas = score_cam_weights(forward_scores, x, acts, base_score=float(x.sum()))
    # upsample_normalize of the constant map yields zeros -> masked input is
    # black; with an explicit all-ones mask alpha must vanish exactly
    assert np.isclose(alphas[0], -x.sum())
    masked_same = forward_scores(x * np.ones((1, 1, 4, 4), dtype=np.float32))
    assert np.isclose(masked_same[0] - x.sum(), 0.0)


def test_score_cam_single_negative_weight_gives_zero_map():
    cam = combine_maps(np.ones((1, 3, 3)), np.array([-2.0]))
    assert np.array_equal(cam, np.zeros((3, 3)))


def test_score_cam_runs_with_gradients_disabled(rng):
    model = build_classifier(ClassifierConfig(family="fire", width=8, blocks=1, seed=1))
    x = rng.random((1, 32, 32)).astype(np.float32)
    with engine.no_grad():
        out = score_cam(model, x, target_class=0)
    assert out.values.shape == (32, 32)
    for _, p in model.named_params():
        assert p.grad is None  # no gradient buffer was touched


def test_methods_share_peak_under_positive_head_rescale(rng):
    model = build_classifier(ClassifierConfig(family="fire", width=8, blocks=1, seed=2))
    x = rng.random((1, 32, 32)).astype(np.float32)
    base_g = grad_cam(model, x, 0)
    base_s = score_cam(model, x, 0)
    head = model.node("head")
    head.params["w"].data *= 3.0
    head.params["b"].data *= 3.0
    scaled_g = grad_cam(model, x, 0)
    scaled_s = score_cam(model, x, 0)
    assert np.unravel_index(base_g.values.argmax(), base_g.values.shape) == \
        np.unravel_index(scaled_g.values.argmax(), scaled_g.values.shape)
    assert np.unravel_index(base_s.values.argmax(), base_s.values.shape) == \
        np.unravel_index(scaled_s.values.argmax(), scaled_s.values.shape)
    assert base_g.values.max() <= 1.0 and scaled_g.values.max() <= 1.0


def test_saliency_output_dims_and_range(rng):
    model = build_classifier(ClassifierConfig(family="fire", width=8, blocks=2, seed=0))
    x = rng.random((1, 32, 32)).astype(np.float32)
    for method in (grad_cam, score_cam):
        out = method(model, x, 0)
        assert out.values.shape == (32, 32)
        assert out.values.min() >= 0.0 and out.values.max() <= 1.0


# ---------------------------------------------------------------- utilities

def test_mass_inside():
    sal = saliency.SaliencyMap(values=np.array([[1.0, 0.0], [1.0, 0.0]]),
                               method="scorecam", tap="t", target_class=0)
    mask = np.array([[255, 0], [0, 0]], dtype=np.uint8)
    assert np.isclose(mass_inside(sal, mask), 0.5)
    zero = saliency.SaliencyMap(values=np.zeros((2, 2)), method="scorecam", tap="t",
                                target_class=0)
    assert mass_inside(zero, mask) == 0.0


def test_write_saliency_outputs(tmp_path):
    sal = saliency.SaliencyMap(values=np.linspace(0, 1, 16).reshape(4, 4),
                               method="gradcam", tap="conv", target_class=2)
    pgm_path, csv_path = write_saliency(sal, tmp_path / "img")
    assert pgm_path.endswith(".cam.pgm") and csv_path.endswith(".cam.csv")
    from cxrpipe.pgm import read_pgm

    img = read_pgm(pgm_path)
    assert img.shape == (4, 4) and img.max() == 255
    header = open(csv_path).readline()
    assert "gradcam" in header and "class=2" in header
