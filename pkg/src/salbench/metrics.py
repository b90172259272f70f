"""Explanation-quality metrics.

ROAD faithfulness: remove the top-p% most salient pixels, fill them by
noisy linear imputation from their neighbors (which avoids the information
leak of hard fills), re-run the model and record the class confidence.
Lower curves mean more faithful maps.

Weighting Game: fraction of (rectified) saliency mass that falls inside a
ground-truth mask, swept over top-p% restrictions. The same computation
against a binarized reference map scores agreement between two methods.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from . import engine
from .errors import (DegenerateReference, DimMismatch, EmptyMask, LengthMismatch,
                     PercentOutOfRange, SingularSystem)
from .saliency import SaliencyMap

__all__ = [
    "MetricId", "MetricCurve", "top_percent_mask", "road_impute", "road_curve",
    "weighting_game", "reference_agreement", "confidence", "write_curve_csv",
    "read_curve_csv",
]

ROAD_PERCENTILES = (10.0, 20.0, 30.0, 40.0, 50.0)
WG_PERCENTILES = tuple(float(p) for p in range(5, 105, 5))


class MetricId(Enum):
    ROAD = "road"
    WG_ANNOTATION = "wg_annotation"
    WG_REFERENCE = "wg_reference"


@dataclass
class MetricCurve:
    metric: MetricId
    percentiles: list
    values: list


def _check_percentiles(percentiles) -> list:
    ps = [float(p) for p in percentiles]
    for p in ps:
        if not (0.0 < p <= 100.0):
            raise PercentOutOfRange(f"percentile {p} not in (0, 100]")
    if any(b <= a for a, b in zip(ps, ps[1:])):
        raise PercentOutOfRange(f"percentiles must be strictly increasing: {ps}")
    return ps


def top_percent_mask(saliency: Union[SaliencyMap, np.ndarray], p: float) -> np.ndarray:
    """Boolean mask of the floor(p% * W * H) highest-saliency pixels.

    Most-relevant-first ordering; ties broken by the lowest flat row-major
    index so the selection is deterministic.
    """
    if not (0.0 < p <= 100.0):
        raise PercentOutOfRange(f"percentile {p} not in (0, 100]")
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    flat = values.reshape(-1)
    # the epsilon keeps exact multiples from flooring down through float error
    count = int(math.floor(p * flat.size / 100.0 + 1e-9))
    mask = np.zeros(flat.size, dtype=bool)
    if count:
        order = np.argsort(-flat, kind="stable")
        mask[order[:count]] = True
    return mask.reshape(values.shape)


def road_impute(image: np.ndarray, mask: np.ndarray, noise_sigma: float = 0.0,
                seed=0) -> np.ndarray:
    """Replace masked pixels with the noisy-linear-imputation solution.

    Each removed pixel is constrained to equal the average of its
    4-connected neighbors; known neighbors feed the right-hand side and
    border pixels use only in-image neighbors. The sparse symmetric system
    is solved exactly, then Gaussian noise N(0, sigma^2) is added to the
    imputed pixels only. Known pixels pass through unchanged.
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    img = image[None] if squeeze else image
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[1:]:
        raise DimMismatch(f"mask {mask.shape} does not match image {img.shape[1:]}")
    if not mask.any():
        out = img.copy()
        return out[0] if squeeze else out
    if mask.all():
        raise SingularSystem("every pixel removed; no anchor values to impute from")

    c, h, w = img.shape
    flat_mask = mask.reshape(-1)
    removed = np.flatnonzero(flat_mask)
    index_of = np.full(h * w, -1, dtype=np.int64)
    index_of[removed] = np.arange(removed.size)

    rows, cols, vals = [], [], []
    rhs = np.zeros((removed.size, c))
    degree = np.zeros(removed.size)
    ry, rx = removed // w, removed % w
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ry + dy, rx + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        degree += inside
        nb = ny[inside] * w + nx[inside]
        here = np.flatnonzero(inside)
        nb_removed = flat_mask[nb]
        rows.extend(here[nb_removed])
        cols.extend(index_of[nb[nb_removed]])
        vals.extend([-1.0] * int(nb_removed.sum()))
        known = nb[~nb_removed]
        rhs[here[~nb_removed]] += img.reshape(c, -1)[:, known].T
    rows.extend(range(removed.size))
    cols.extend(range(removed.size))
    vals.extend(degree)

    system = coo_matrix((vals, (rows, cols)), shape=(removed.size, removed.size)).tocsc()
    solution = splu(system).solve(rhs)  # (removed, channels)
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        solution = solution + rng.normal(0.0, noise_sigma, size=solution.shape)

    out = img.reshape(c, -1).copy()
    out[:, removed] = solution.T
    out = out.reshape(c, h, w)
    return out[0] if squeeze else out


def confidence(logits: np.ndarray, class_index: int) -> float:
    """Model confidence: softmax over 2+ logits, sigmoid of a single one."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 1:
        z = logits[0] if class_index == 0 else -logits[0]
        return float(1.0 / (1.0 + np.exp(-z)))
    shifted = np.exp(logits - logits.max())
    return float(shifted[class_index] / shifted.sum())


def road_curve(model: engine.ModelSpec, tiles: Sequence[np.ndarray],
               saliencies: Sequence[SaliencyMap], class_index: int,
               percentiles: Sequence[float] = ROAD_PERCENTILES,
               noise_sigma: float = 0.01, seed: int = 0,
               counter: Optional[engine.PassCounter] = None) -> MetricCurve:
    """Mean post-perturbation confidence at each removal percentile.

    For a faithful saliency map the curve drops steeply as its top pixels
    are removed and imputed away.
    """
    if len(tiles) != len(saliencies):
        raise LengthMismatch(f"{len(tiles)} tiles vs {len(saliencies)} saliency maps")
    if not tiles:
        raise LengthMismatch("no tiles to evaluate")
    ps = _check_percentiles(percentiles)
    for t, s in zip(tiles, saliencies):
        if s.values.shape != t.shape[1:]:
            raise DimMismatch(f"saliency {s.values.shape} does not match tile {t.shape[1:]}")
    values = []
    for pi, p in enumerate(ps):
        confs = []
        for ti, (tile, sal) in enumerate(zip(tiles, saliencies)):
            mask = top_percent_mask(sal, p)
            perturbed = road_impute(tile, mask, noise_sigma, seed=[seed, pi, ti])
            trace = engine.forward(model, perturbed, counter)
            confs.append(confidence(trace.logits, class_index))
        values.append(float(np.mean(confs)))
    return MetricCurve(MetricId.ROAD, ps, values)


def weighting_game(saliency: SaliencyMap, mask: np.ndarray,
                   percentiles: Sequence[float] = WG_PERCENTILES,
                   metric: MetricId = MetricId.WG_ANNOTATION) -> MetricCurve:
    """Share of rectified saliency mass inside the mask, per top-p% sweep.

    Negative saliency is clipped to zero first (mass is nonnegative).
    A selection with zero total mass scores 0.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != saliency.values.shape:
        raise DimMismatch(f"mask {mask.shape} does not match saliency {saliency.values.shape}")
    if not mask.any():
        raise EmptyMask("annotation mask has no pixels set")
    ps = _check_percentiles(percentiles)
    rect = np.maximum(saliency.values, 0.0)
    values = []
    for p in ps:
        selected = top_percent_mask(rect, p)
        total = rect[selected].sum()
        inside = rect[selected & mask].sum()
        values.append(float(inside / total) if total > 0 else 0.0)
    return MetricCurve(metric, ps, values)


def reference_agreement(saliency: SaliencyMap, reference: SaliencyMap,
                        percentiles: Sequence[float] = WG_PERCENTILES,
                        q: float = 20.0) -> MetricCurve:
    """Weighting game against a pseudo-mask cut from a reference map.

    The reference is binarized into its top-q% pixels (by rectified value)
    and the saliency map is scored against that mask.
    """
    if reference.values.shape != saliency.values.shape:
        raise DimMismatch(f"reference {reference.values.shape} does not match "
                          f"saliency {saliency.values.shape}")
    ref_rect = np.maximum(reference.values, 0.0)
    if ref_rect.max(initial=0.0) <= 0.0:
        raise DegenerateReference("reference map has no positive mass")
    pseudo_mask = top_percent_mask(ref_rect, q)
    curve = weighting_game(saliency, pseudo_mask, percentiles, metric=MetricId.WG_REFERENCE)
    return curve


# --- serialization ----------------------------------------------------------

def write_curve_csv(curve: MetricCurve, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["percentile", "value"])
        for p, v in zip(curve.percentiles, curve.values):
            writer.writerow([f"{p:g}", repr(float(v))])


def read_curve_csv(path, metric: MetricId = MetricId.ROAD) -> MetricCurve:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["percentile", "value"]:
            raise LengthMismatch(f"unexpected curve CSV header {header}")
        rows = [(float(p), float(v)) for p, v in reader]
    return MetricCurve(metric, [p for p, _ in rows], [v for _, v in rows])
