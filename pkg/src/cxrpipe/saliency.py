"""Class-activation saliency: gradient-weighted (Grad-CAM) and forward-score
weighted (Score-CAM) maps over any ModelGraph with named activation taps.

Both methods weight the tap layer's feature maps, pass the combination
through ReLU, upsample to the input size and max-normalize. The class score
is always the pre-softmax logit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .imageproc import bilinear_resize_f
from .pgm import write_pgm


@dataclass
class SaliencyMap:
    """Non-negative per-pixel relevance, max-normalized to [0, 1] when any
    value is positive (an all-zero map is permitted)."""

    values: np.ndarray
    method: str
    tap: str
    target_class: int


def upsample_normalize(activation: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsample then min-max normalize into [0, 1]; a constant map
    normalizes to all zeros."""
    activation = np.asarray(activation, dtype=np.float64)
    if activation.ndim != 2:
        raise ValueError(f"expected 2-d activation map, got shape {activation.shape}")
    if out_h < activation.shape[0] or out_w < activation.shape[1]:
        raise ValueError("target size must be at least the source size")
    up = bilinear_resize_f(activation, out_h, out_w)
    lo, hi = up.min(), up.max()
    if hi == lo:
        return np.zeros((out_h, out_w))
    return (up - lo) / (hi - lo)


def _prepare_input(image: np.ndarray, model) -> np.ndarray:
    x = np.asarray(image, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] != model.in_channels:
        raise ValueError(f"expected ({model.in_channels}, H, W) input, got shape {x.shape}")
    return x[None]  # batch of one


def combine_maps(activations: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """ReLU of the alpha-weighted sum of feature maps."""
    cam = np.einsum("k,khw->hw", np.asarray(alphas, dtype=np.float64),
                    np.asarray(activations, dtype=np.float64))
    return np.maximum(cam, 0.0)


def _finalize(cam: np.ndarray, out_h: int, out_w: int, method: str, tap: str,
              target_class: int) -> SaliencyMap:
    up = np.maximum(bilinear_resize_f(cam, out_h, out_w), 0.0)
    peak = up.max()
    if peak > 0:
        up = up / peak
    return SaliencyMap(values=up, method=method, tap=tap, target_class=target_class)


def grad_cam(model, image: np.ndarray, target_class: int, tap: str | None = None) -> SaliencyMap:
    """Weight each tap feature map by the spatial mean of the logit gradient
    flowing into it, then combine."""
    tap = tap or model.last_conv_name()
    x = _prepare_input(image, model)
    _, acts = model.forward(x, train=False, taps=(tap, model.logits_name))
    tap_t = acts[tap]
    logits = acts[model.logits_name]
    if tap_t.data.ndim != 4:
        raise ValueError(f"tap {tap!r} is not a feature-map stack (shape {tap_t.shape})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot.reshape(logits.shape[0], -1)[0, int(target_class)] = 1.0
    engine.backward(engine.sum_all(engine.scale(logits, onehot)))
    if tap_t.grad is None:
        raise ValueError(f"tap {tap!r} is not differentiable from the output")
    alphas = tap_t.grad[0].mean(axis=(1, 2))
    cam = combine_maps(tap_t.data[0], alphas)
    return _finalize(cam, x.shape[2], x.shape[3], "gradcam", tap, int(target_class))


def score_cam_weights(forward_scores, x: np.ndarray, activations: np.ndarray,
                      base_score: float, chunk: int = 16) -> np.ndarray:
    """Score-CAM channel weights: the logit change when the input is masked
    by each upsampled, normalized feature map. `forward_scores` maps a batch
    (B, C, H, W) to the target-class logits (B,)."""
    k, _, _ = activations.shape
    h, w = x.shape[2], x.shape[3]
    masks = np.stack([upsample_normalize(activations[i], h, w) for i in range(k)])
    alphas = np.empty(k, dtype=np.float64)
    for start in range(0, k, chunk):
        sel = slice(start, min(start + chunk, k))
        masked = x * masks[sel][:, None].astype(np.float32)
        alphas[sel] = np.asarray(forward_scores(masked), dtype=np.float64) - base_score
    return alphas


def score_cam(model, image: np.ndarray, target_class: int, tap: str | None = None,
              chunk: int = 16) -> SaliencyMap:
    """Gradient-free saliency: runs only forward passes (no gradient buffers
    are touched)."""
    tap = tap or model.last_conv_name()
    x = _prepare_input(image, model)
    c = int(target_class)
    with engine.no_grad():
        _, acts = model.forward(x, train=False, taps=(tap, model.logits_name))
        a = acts[tap]
        if a.data.ndim != 4:
            raise ValueError(f"tap {tap!r} is not a feature-map stack (shape {a.shape})")
        activations = a.data[0].astype(np.float64)
        base = float(acts[model.logits_name].data.reshape(1, -1)[0, c])

        def forward_scores(batch):
            _, tapped = model.forward(batch, train=False, taps=(model.logits_name,))
            return tapped[model.logits_name].data.reshape(batch.shape[0], -1)[:, c]

        alphas = score_cam_weights(forward_scores, x, activations, base, chunk=chunk)
    cam = combine_maps(activations, alphas)
    return _finalize(cam, x.shape[2], x.shape[3], "scorecam", tap, c)


def saliency_map(model, image: np.ndarray, target_class: int, method: str,
                 tap: str | None = None) -> SaliencyMap:
    if method == "gradcam":
        return grad_cam(model, image, target_class, tap)
    if method == "scorecam":
        return score_cam(model, image, target_class, tap)
    raise ValueError(f"unknown saliency method {method!r}")


def mass_inside(sal: SaliencyMap, mask: np.ndarray) -> float:
    """Fraction of total saliency mass that falls inside the binary mask."""
    mask = np.asarray(mask) > 0
    if mask.shape != sal.values.shape:
        raise ValueError("mask shape does not match saliency map")
    total = sal.values.sum()
    if total <= 0:
        return 0.0
    return float(sal.values[mask].sum() / total)


def write_saliency(sal: SaliencyMap, stem) -> tuple[str, str]:
    """Write `<stem>.cam.pgm` (8-bit rendering) and `<stem>.cam.csv` (raw
    values); returns the two paths."""
    pgm_path = f"{stem}.cam.pgm"
    csv_path = f"{stem}.cam.csv"
    write_pgm(pgm_path, np.clip(np.floor(sal.values * 255.0 + 0.5), 0, 255).astype(np.uint8))
    with open(csv_path, "w") as fh:
        fh.write(f"# method={sal.method} tap={sal.tap} class={sal.target_class}\n")
        for row in sal.values:
            fh.write(",".join(repr(v) for v in row) + "\n")
    return pgm_path, csv_path
