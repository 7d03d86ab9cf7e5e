"""Grayscale image transforms: histogram equalization, CLAHE, complement,
3-channel composition, geometric augmentation, resizing and masking.

Images are (H, W) uint8 arrays; multi-channel images are (C, H, W) uint8.
All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Rotation angles allowed by the augmentation policy (degrees).
ALLOWED_ROTATIONS = (0, 5, -5, 10, -10, 20, -20, 25, -25, 30, -30)

# Translation fraction bounds for sampled augmentation specs.
TRANSLATE_LIMIT = 0.15


def check_gray(img: np.ndarray) -> np.ndarray:
    """Validate a (H, W) uint8 image and return it."""
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected non-empty 2-d grayscale image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got dtype {img.dtype}")
    return img


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # nearest integer, ties away from zero (values here are always >= 0)
    return np.floor(x + 0.5)


@dataclass(frozen=True)
class HistogramMapping:
    """A 256-entry monotone intensity lookup table."""

    lut: np.ndarray
    source: str  # "global_he" or "clahe_tile"

    def __post_init__(self):
        lut = np.asarray(self.lut)
        if lut.shape != (256,):
            raise ValueError("lut must have 256 entries")
        if np.any(np.diff(lut) < 0):
            raise ValueError("lut must be monotone non-decreasing")
        if lut.min() < 0 or lut.max() > 255:
            raise ValueError("lut values must lie in [0, 255]")

    def apply(self, img: np.ndarray) -> np.ndarray:
        return np.asarray(self.lut, dtype=np.uint8)[check_gray(img)]


def he_mapping(img: np.ndarray) -> HistogramMapping:
    """Global histogram-equalization LUT: v -> round(255 * CDF(v))."""
    img = check_gray(img)
    hist = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(hist) / img.size
    lut = _round_half_away(255.0 * cdf).astype(np.uint8)
    return HistogramMapping(lut=lut, source="global_he")


def equalize_hist(img: np.ndarray) -> np.ndarray:
    """Spread intensities by mapping each pixel through the image CDF."""
    return he_mapping(img).apply(img)


def complement(img: np.ndarray) -> np.ndarray:
    """Invert intensities: y = 255 - x."""
    return (255 - check_gray(img).astype(np.int16)).astype(np.uint8)


def _tile_lut(hist: np.ndarray, n_pixels: int, clip_limit: float,
              target: str, alpha: float) -> np.ndarray:
    """Float LUT for one tile: clip histogram, redistribute, map through target CDF."""
    nz = np.nonzero(hist)[0]
    if nz.size == 1:
        # constant tile: degenerate histogram maps to identity
        return np.arange(256, dtype=np.float64)
    # actual clip count; clip_limit 1.0 disables clipping entirely
    min_clip = np.ceil(n_pixels / 256.0)
    clip = min_clip + clip_limit * (n_pixels - min_clip)
    h = np.minimum(hist.astype(np.float64), clip)
    excess = n_pixels - h.sum()
    h += excess / 256.0
    cdf = np.cumsum(h) / n_pixels
    if target == "uniform":
        return 255.0 * cdf
    if target == "rayleigh":
        hconst = 2.0 * alpha * alpha
        vmax = 1.0 - np.exp(-1.0 / hconst)
        val = np.minimum(vmax * cdf, 1.0 - 1e-12)
        y = np.sqrt(-hconst * np.log(1.0 - val))
        return np.minimum(255.0 * y, 255.0)
    raise ValueError(f"unknown CLAHE target {target!r}")


def clahe(img: np.ndarray, tiles: tuple[int, int] = (8, 8), clip_limit: float = 0.01,
          target: str = "rayleigh", alpha: float = 0.4) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    tiles is the (rows, cols) tile grid; the image is padded by reflection
    when the grid does not divide it. clip_limit in (0, 1] bounds per-tile
    contrast (1.0 means no clipping); excess histogram mass is redistributed
    uniformly. target selects the per-tile output distribution ("uniform" or
    "rayleigh" with parameter alpha). Pixel values are blended bilinearly
    between the four surrounding tile mappings.
    """
    img = check_gray(img)
    ty, tx = int(tiles[0]), int(tiles[1])
    h, w = img.shape
    if ty < 1 or tx < 1:
        raise ValueError("tile grid must be at least 1x1")
    if ty > h or tx > w:
        raise ValueError(f"tile grid {ty}x{tx} larger than image {h}x{w}")
    if not 0.0 < clip_limit <= 1.0:
        raise ValueError("clip_limit must be in (0, 1]")
    if target not in ("uniform", "rayleigh"):
        raise ValueError(f"unknown CLAHE target {target!r}")

    th = -(-h // ty)  # ceil division
    tw = -(-w // tx)
    pad_y, pad_x = ty * th - h, tx * tw - w
    padded = np.pad(img, ((0, pad_y), (0, pad_x)), mode="symmetric") if pad_y or pad_x else img

    luts = np.empty((ty, tx, 256), dtype=np.float64)
    for r in range(ty):
        for c in range(tx):
            tile = padded[r * th:(r + 1) * th, c * tw:(c + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=256)
            luts[r, c] = _tile_lut(hist, tile.size, clip_limit, target, alpha)

    # bilinear blend between the four nearest tile-center mappings
    fy = np.clip((np.arange(ty * th) - (th - 1) / 2.0) / th, 0.0, ty - 1.0)
    fx = np.clip((np.arange(tx * tw) - (tw - 1) / 2.0) / tw, 0.0, tx - 1.0)
    r0 = np.floor(fy).astype(np.intp)
    c0 = np.floor(fx).astype(np.intp)
    r0 = np.minimum(r0, ty - 1)
    c0 = np.minimum(c0, tx - 1)
    r1 = np.minimum(r0 + 1, ty - 1)
    c1 = np.minimum(c0 + 1, tx - 1)
    wy = (fy - r0)[:, None]
    wx = (fx - c0)[None, :]

    pix = padded.astype(np.intp)
    v00 = luts[r0[:, None], c0[None, :], pix]
    v01 = luts[r0[:, None], c1[None, :], pix]
    v10 = luts[r1[:, None], c0[None, :], pix]
    v11 = luts[r1[:, None], c1[None, :], pix]
    # lerp form keeps equal corner values exact (1x1 grid reduces to the LUT)
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    out = top + wy * (bot - top)
    out = np.clip(_round_half_away(out), 0, 255).astype(np.uint8)
    return out[:h, :w]


def compose_3channel(img: np.ndarray, tiles=(8, 8), clip_limit=0.01,
                     target="rayleigh", alpha=0.4) -> np.ndarray:
    """Stack (original, CLAHE, complement) as a (3, H, W) image."""
    img = check_gray(img)
    return np.stack([img, clahe(img, tiles, clip_limit, target, alpha), complement(img)])


@dataclass(frozen=True)
class AugmentSpec:
    """One geometric augmentation: rotate about center, then translate.

    rotation_deg must come from ALLOWED_ROTATIONS; translate_frac is
    (tx, ty) as fractions of width/height. Policy sampling (sample())
    keeps translations within TRANSLATE_LIMIT; `augment` itself accepts
    any finite translation.
    """

    rotation_deg: float = 0.0
    translate_frac: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    @classmethod
    def sample(cls, rng: np.random.Generator, seed: int = 0) -> "AugmentSpec":
        rot = float(rng.choice(ALLOWED_ROTATIONS))
        tx = float(rng.uniform(-TRANSLATE_LIMIT, TRANSLATE_LIMIT))
        ty = float(rng.uniform(-TRANSLATE_LIMIT, TRANSLATE_LIMIT))
        return cls(rotation_deg=rot, translate_frac=(tx, ty), seed=seed)

    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.translate_frac == (0.0, 0.0)


def _bilinear_sample(img_f: np.ndarray, sy: np.ndarray, sx: np.ndarray, fill: float) -> np.ndarray:
    """Sample float image at (sy, sx); out-of-bounds corners contribute fill."""
    h, w = img_f.shape
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    wy = sy - y0
    wx = sx - x0
    out = np.zeros(sy.shape, dtype=np.float64)
    for dy, dx, wgt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                        (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy = y0 + dy
        xx = x0 + dx
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.where(inside,
                        img_f[np.clip(yy, 0, h - 1).astype(np.intp),
                              np.clip(xx, 0, w - 1).astype(np.intp)],
                        fill)
        out += wgt * vals
    return out


def augment(img: np.ndarray, spec: AugmentSpec, fill: int = 0) -> np.ndarray:
    """Rotate about the image center, then translate; bilinear sampling,
    out-of-bounds pixels take the fill value."""
    img = check_gray(img)
    if spec.rotation_deg not in ALLOWED_ROTATIONS:
        raise ValueError(f"rotation {spec.rotation_deg} not in allowed set {ALLOWED_ROTATIONS}")
    if spec.is_identity():
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    tx = spec.translate_frac[0] * w
    ty = spec.translate_frac[1] * h
    theta = np.deg2rad(spec.rotation_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dx = xx - tx - cx
    dy = yy - ty - cy
    # inverse rotation maps destination back onto the source grid
    sx = cos_t * dx + sin_t * dy + cx
    sy = -sin_t * dx + cos_t * dy + cy
    out = _bilinear_sample(img.astype(np.float64), sy, sx, float(fill))
    return np.clip(_round_half_away(out), 0, 255).astype(np.uint8)


def bilinear_resize_f(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a float (H, W) array."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    sy = np.arange(out_h) * ((h - 1) / (out_h - 1)) if out_h > 1 else np.full(1, (h - 1) / 2.0)
    sx = np.arange(out_w) * ((w - 1) / (out_w - 1)) if out_w > 1 else np.full(1, (w - 1) / 2.0)
    y0 = np.minimum(np.floor(sy).astype(np.intp), h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.intp), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    top = arr[np.ix_(y0, x0)] + wx * (arr[np.ix_(y0, x1)] - arr[np.ix_(y0, x0)])
    bot = arr[np.ix_(y1, x0)] + wx * (arr[np.ix_(y1, x1)] - arr[np.ix_(y1, x0)])
    return top + wy * (bot - top)


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resize a grayscale image with corner-aligned bilinear sampling."""
    img = check_gray(img)
    out = bilinear_resize_f(img.astype(np.float64), out_h, out_w)
    return np.clip(_round_half_away(out), 0, 255).astype(np.uint8)


def apply_mask(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out pixels where the binary mask is 0; channels handled independently."""
    img = np.asarray(img)
    mask = check_gray(mask)
    if not np.all((mask == 0) | (mask == 255)):
        raise ValueError("mask must contain only values 0 and 255")
    if img.ndim == 2:
        check_gray(img)
        if img.shape != mask.shape:
            raise ValueError(f"mask shape {mask.shape} != image shape {img.shape}")
        return np.where(mask == 0, 0, img).astype(np.uint8)
    if img.ndim == 3:
        if img.shape[1:] != mask.shape:
            raise ValueError(f"mask shape {mask.shape} != image shape {img.shape[1:]}")
        return np.where(mask[None, :, :] == 0, 0, img).astype(np.uint8)
    raise ValueError(f"expected 2-d or 3-d image, got shape {img.shape}")
