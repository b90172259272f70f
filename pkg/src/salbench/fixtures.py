"""Seeded synthetic slides with planted lesions.

Clinical whole-slide scans cannot ship with the repository, so the
benchmark and the metric sanity checks run on generated fixtures: textured
pink "tissue" blobs on a white background, sprinkled with dark nuclei-like
dots, plus rectangular lesion regions carrying a much higher dot density.
The annotation polygons delimit the lesions exactly, and the dot-density
contrast is strong enough that a small hand-built network
(:func:`lesion_detector`) separates lesion tiles from clean tissue without
any training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .engine import (Conv2D, Dense, GlobalAvgPool, MaxPool2D, ModelSpec, ReLU,
                     shape_propagate)
from .errors import SpecInvalid
from .slides import SlideImage

__all__ = ["FixtureSpec", "Fixture", "generate_fixture", "lesion_detector",
           "TISSUE_RGB", "DOT_RGB"]

TISSUE_RGB = (214, 176, 204)
DOT_RGB = (84, 48, 112)
NOISE_AMP = 10                 # per-channel texture noise, uint8 steps
TISSUE_DOTS_PER_PX = 0.0008    # sparse background nuclei
LESION_DOTS_PER_PX = 0.02      # dense nuclei inside lesions


@dataclass(frozen=True)
class FixtureSpec:
    """Slide geometry and lesion layout; dims must be multiples of 256."""

    width: int = 1024
    height: int = 1024
    lesion_count: int = 4
    lesion_size: Tuple[int, int] = (24, 48)   # min/max side, pixels
    full_tissue: bool = False                 # cover the whole slide with tissue
    blob_count: int = 4                       # tissue blobs when not full_tissue


@dataclass
class Fixture:
    slide: SlideImage
    polygons: List[np.ndarray]
    lesion_mask: np.ndarray  # (height, width) bool, planted ground truth


def _validate(spec: FixtureSpec):
    problems = []
    if spec.width % 256 or spec.height % 256 or spec.width < 256 or spec.height < 256:
        problems.append(f"dims {spec.width}x{spec.height} must be multiples of 256")
    lo, hi = spec.lesion_size
    if not (4 <= lo <= hi):
        problems.append(f"lesion_size {spec.lesion_size} must satisfy 4 <= min <= max")
    if hi >= min(spec.width, spec.height) // 2:
        problems.append(f"lesions of size {hi} do not fit the slide")
    if spec.lesion_count < 0 or spec.blob_count < 1:
        problems.append("lesion_count must be >= 0 and blob_count >= 1")
    if problems:
        raise SpecInvalid("; ".join(problems))


def _tissue_mask(spec: FixtureSpec, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.full_tissue:
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(spec.blob_count):
        cx = rng.uniform(0.2 * w, 0.8 * w)
        cy = rng.uniform(0.2 * h, 0.8 * h)
        ax = rng.uniform(0.18, 0.38) * w
        ay = rng.uniform(0.18, 0.38) * h
        mask |= ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    return mask


def _paint_dots(pixels: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    # 2x2 dark dots; positions are pre-clamped one pixel from the border
    for dy in (0, 1):
        for dx in (0, 1):
            pixels[ys + dy, xs + dx] = DOT_RGB


def generate_fixture(seed: int, spec: FixtureSpec = FixtureSpec()) -> Fixture:
    """Deterministically synthesize a slide, its annotation and ground truth.

    The same seed and spec always produce byte-identical pixels and
    polygons.
    """
    _validate(spec)
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width

    tissue = _tissue_mask(spec, rng)
    pixels = np.full((h, w, 3), 255, dtype=np.uint8)
    noise = rng.integers(-NOISE_AMP, NOISE_AMP + 1, size=(h, w, 3), dtype=np.int16)
    base = np.asarray(TISSUE_RGB, dtype=np.int16)
    textured = np.clip(base[None, None, :] + noise, 0, 255).astype(np.uint8)
    pixels[tissue] = textured[tissue]

    tissue_flat = np.flatnonzero(tissue[: h - 1, : w - 1])
    n_bg = int(TISSUE_DOTS_PER_PX * tissue_flat.size)
    if n_bg and tissue_flat.size:
        picks = tissue_flat[rng.integers(0, tissue_flat.size, size=n_bg)]
        _paint_dots(pixels, picks // (w - 1), picks % (w - 1))

    lo, hi = spec.lesion_size
    polygons = []
    lesion_mask = np.zeros((h, w), dtype=bool)
    for _ in range(spec.lesion_count):
        for _attempt in range(100):
            lw = int(rng.integers(lo, hi + 1))
            lh = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(2, w - lw - 2))
            y0 = int(rng.integers(2, h - lh - 2))
            probe = tissue[y0:y0 + lh, x0:x0 + lw]
            if probe.all():
                break
        else:
            continue  # no room in tissue for this lesion; keep the rest
        x1, y1 = x0 + lw, y0 + lh
        polygons.append(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64))
        lesion_mask[y0:y1, x0:x1] = True
        n_dots = max(1, int(LESION_DOTS_PER_PX * lw * lh))
        xs = rng.integers(x0, x1 - 1, size=n_dots)
        ys = rng.integers(y0, y1 - 1, size=n_dots)
        _paint_dots(pixels, ys, xs)

    return Fixture(slide=SlideImage(pixels=pixels, microns_per_pixel=0.344),
                   polygons=polygons, lesion_mask=lesion_mask)


def lesion_detector(input_hw: int = 64) -> ModelSpec:
    """Hand-built dot-density classifier matched to the fixture textures.

    Layer 1 responds to dark pixels (dots), a max pool keeps the response
    through downsampling, layer 2 sums responses over a 3x3 neighborhood
    and the global average feeds a steep two-class head: class 1 fires when
    the mean dot density is lesion-like. No training involved; the
    constants below are derived from the fixture texture statistics.
    """
    if input_hw % 2 != 0 or input_hw < 8:
        raise SpecInvalid("input_hw must be even and at least 8")
    # dots are purple: blue well above green. A positive blue tap minus a
    # green tap fires on dots, stays negative on pink tissue and white, and
    # keeps the dot evidence a positive contribution (so relevance
    # propagation attributes dots positively at the pixel level)
    w1 = np.zeros((1, 3, 3, 3))
    w1[0, 1, 1, 1] = -4.0
    w1[0, 2, 1, 1] = 4.0
    b1 = np.array([-0.8])
    w2 = np.zeros((2, 1, 3, 3))
    w2[0, 0] = 1.0
    b2 = np.zeros(2)
    # mean dot-density signal sits near 0.055 on lesion tiles and 0.015 on
    # clean tissue for the default fixture textures; threshold between them
    gain, offset = 75.0, 75.0 * 0.030
    wd = np.array([[-gain, 0.0], [gain, 0.0]])
    bd = np.array([offset, -offset])
    model = ModelSpec(
        layers=(
            Conv2D(3, 1, 3, weights=w1, bias=b1, stride=1, padding=1),
            ReLU(),
            MaxPool2D(2, 2),
            Conv2D(1, 2, 3, weights=w2, bias=b2, stride=1, padding=1),
            ReLU(),
            GlobalAvgPool(),
            Dense(2, 2, weights=wd, bias=bd),
        ),
        input_shape=(3, input_hw, input_hw),
        class_count=2,
    )
    shape_propagate(model)
    return model
