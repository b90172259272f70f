"""Heatmap rendering for saliency maps.

Diverging colormap on a white neutral: positive values fade towards red,
negative towards blue, scaled symmetrically by max(|min|, |max|) so zero
always lands on the same neutral color and a map and its negation render
as exact red/blue channel swaps.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import WriteError
from .saliency import SaliencyMap

__all__ = ["heatmap_pixels", "render_heatmap"]


def heatmap_pixels(saliency: SaliencyMap) -> np.ndarray:
    """Map saliency values to (H, W, 3) uint8 diverging colors."""
    v = saliency.values
    scale = max(abs(float(v.min())), abs(float(v.max())))
    if scale == 0.0:
        return np.full(v.shape + (3,), 255, dtype=np.uint8)
    t = np.clip(v / scale, -1.0, 1.0)
    fade = np.rint(255.0 * (1.0 - np.abs(t))).astype(np.uint8)
    out = np.empty(v.shape + (3,), dtype=np.uint8)
    pos = t >= 0
    out[..., 0] = np.where(pos, 255, fade)
    out[..., 1] = fade
    out[..., 2] = np.where(pos, fade, 255)
    return out


def render_heatmap(saliency: SaliencyMap, path) -> np.ndarray:
    """Write the rendered heatmap PNG; returns the pixel array."""
    pixels = heatmap_pixels(saliency)
    try:
        Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc
    return pixels
