"""Synthetic lung-phantom generator: deterministic images, exact ellipse
masks and three separable class textures, so the full pipeline can train and
evaluate without any clinical data.

Each phantom is a bright thorax background with two dark elliptical lung
fields. The class signal is injected strictly inside the lung mask:
peripheral bright blobs, diffuse noise, or one focal consolidation. The
texture families differ in structure and in mean intensity by a wide margin,
which keeps segmentation and 3-class classification learnable at 64x64.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pgm import write_pgm

CLASS_NAMES = ("COVID19", "MERS", "SARS")

# lung-field geometry ranges, as fractions of the image size; chosen so the
# two ellipses never touch, always stay inside the frame, and cover roughly a
# third of it (large enough that saliency-localization thresholds are
# meaningful at coarse tap resolutions)
LEFT_CX = (0.25, 0.31)
RIGHT_CX = (0.69, 0.75)
CY = (0.48, 0.54)
SEMI_X = (0.14, 0.18)
SEMI_Y = (0.30, 0.38)

BACKGROUND_LEVEL = 170.0
LUNG_LEVEL = 70.0


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    size: int = 64
    class_label: str = "COVID19"

    def __post_init__(self):
        if self.size < 32:
            raise ValueError("phantom size must be >= 32")
        if self.class_label not in CLASS_NAMES:
            raise ValueError(f"unknown class {self.class_label!r}; choose from {CLASS_NAMES}")


def _ellipse_mask(size, cx, cy, ax, ay):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def _lung_fields(rng, size):
    cy = rng.uniform(*CY) * size
    lungs = []
    for cx_range in (LEFT_CX, RIGHT_CX):
        cx = rng.uniform(*cx_range) * size
        ax = rng.uniform(*SEMI_X) * size
        ay = rng.uniform(*SEMI_Y) * size
        lungs.append((cx, cy, ax, ay))
    return lungs


def _peripheral_blobs(rng, size, lungs, field):
    # bright blobs near the lung boundary (normalized radius 0.55..0.9)
    yy, xx = np.mgrid[0:size, 0:size]
    for cx, cy, ax, ay in lungs:
        for _ in range(int(rng.integers(3, 6))):
            r = rng.uniform(0.55, 0.9)
            ang = rng.uniform(0, 2 * np.pi)
            bx = cx + r * ax * np.cos(ang)
            by = cy + r * ay * np.sin(ang)
            amp = rng.uniform(25.0, 40.0)
            sigma = rng.uniform(0.04, 0.06) * size
            field += amp * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * sigma ** 2))


def _focal_consolidation(rng, size, lungs, field):
    cx, cy, ax, ay = lungs[int(rng.integers(0, 2))]
    ox = rng.uniform(-0.25, 0.25) * ax
    oy = rng.uniform(-0.25, 0.25) * ay
    fx = rng.uniform(0.5, 0.65) * ax
    fy = rng.uniform(0.5, 0.65) * ay
    blob = _ellipse_mask(size, cx + ox, cy + oy, fx, fy)
    field[blob] += rng.uniform(105.0, 130.0)


def generate_phantom(spec: PhantomSpec):
    """Build one phantom; returns (image, mask, label) with the mask as a
    {0, 255} uint8 raster exactly matching the ellipse union.

    Geometry and background come from a class-independent stream, so two
    specs differing only in class share mask and background exactly; the
    class texture is injected strictly inside the mask.
    """
    rng = np.random.default_rng([abs(int(spec.seed)), 0x9A])
    rng_tex = np.random.default_rng([abs(int(spec.seed)),
                                     CLASS_NAMES.index(spec.class_label), 0x7E])
    size = spec.size
    lungs = _lung_fields(rng, size)
    mask = np.zeros((size, size), dtype=bool)
    for cx, cy, ax, ay in lungs:
        mask |= _ellipse_mask(size, cx, cy, ax, ay)

    grad = (np.arange(size, dtype=np.float64) / size - 0.5) * 20.0
    img = BACKGROUND_LEVEL + grad[:, None] + rng.normal(0.0, 2.0, (size, size))
    lung_base = LUNG_LEVEL + rng.uniform(-5.0, 5.0)
    img[mask] = lung_base + rng.normal(0.0, 2.0, int(mask.sum()))

    texture = np.zeros((size, size), dtype=np.float64)
    if spec.class_label == "COVID19":
        _peripheral_blobs(rng_tex, size, lungs, texture)
    elif spec.class_label == "MERS":
        texture += rng_tex.uniform(25.0, 55.0, (size, size))
    else:  # SARS
        _focal_consolidation(rng_tex, size, lungs, texture)
    img[mask] += texture[mask]  # class signal lives strictly inside the lungs

    img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return img, np.where(mask, 255, 0).astype(np.uint8), spec.class_label


def mask_area_bounds(size: int) -> tuple[float, float]:
    """Analytic bounds on the phantom mask pixel count from the geometry
    ranges (two disjoint ellipses, with slack for pixel discretization)."""
    lo = 2 * np.pi * (SEMI_X[0] * size) * (SEMI_Y[0] * size)
    hi = 2 * np.pi * (SEMI_X[1] * size) * (SEMI_Y[1] * size)
    return 0.85 * lo, 1.15 * hi


def generate_dataset(out_dir, counts, seed: int = 0, size: int = 64) -> Path:
    """Write phantom images, masks, a `manifest.csv` (path,label,mask_path)
    and a checksum list under out_dir; returns the manifest path.

    counts is either an int (per class) or a {label: n} mapping.
    """
    out_dir = Path(out_dir)
    if isinstance(counts, int):
        counts = {name: counts for name in CLASS_NAMES}
    for label in counts:
        if label not in CLASS_NAMES:
            raise ValueError(f"unknown class {label!r}")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rows = []
    checksums = []
    for label in CLASS_NAMES:
        n = int(counts.get(label, 0))
        for i in range(n):
            img, mask, _ = generate_phantom(
                PhantomSpec(seed=abs(int(seed)) * 1_000_003 + i, size=size, class_label=label))
            img_rel = f"images/{label.lower()}_{i:04d}.pgm"
            mask_rel = f"masks/{label.lower()}_{i:04d}.pgm"
            write_pgm(out_dir / img_rel, img)
            write_pgm(out_dir / mask_rel, mask)
            rows.append((img_rel, label, mask_rel))
            for rel in (img_rel, mask_rel):
                digest = hashlib.sha256((out_dir / rel).read_bytes()).hexdigest()
                checksums.append(f"{digest}  {rel}")

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path", "label", "mask_path"])
        wr.writerows(rows)
    (out_dir / "checksums.sha256").write_text("\n".join(checksums) + "\n")
    return manifest_path
