"""The five tile-explanation methods.

Each produces a signed per-pixel :class:`SaliencyMap` at input resolution
for one (model, tile, class) triple. Occlusion perturbs the input and needs
many forward passes; CAM reads the shared forward trace with no extra
passes; GradCAM++, HiResCAM and the composite relevance propagation each
cost one backward-equivalent pass. All methods are pure and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from . import engine
from .engine import (Conv2D, Dense, ForwardTrace, GlobalAvgPool, GlobalMaxPool,
                     MaxPool2D, ModelSpec, PassCounter, ReLU)
from .errors import (ClassOutOfRange, ConfigInvalid, NotCamEligible, ParamInvalid,
                     ShapeInvalid, ShapeMismatch, TraceMismatch)

__all__ = [
    "Method", "SaliencyMap", "OcclusionConfig", "LrpParams",
    "occlusion_map", "cam_map", "gradcampp_map", "hirescam_map",
    "lrp_composite_map", "upsample_map", "compute_map", "window_starts",
]


class Method(Enum):
    OCCLUSION = "occlusion"
    CAM = "cam"
    GRADCAMPP = "gradcampp"
    HIRESCAM = "hirescam"
    LRP = "lrp"


@dataclass
class SaliencyMap:
    """Per-pixel importance grid; positive = evidence for the class."""

    values: np.ndarray  # (height, width) float64
    method: Optional[Method] = None
    class_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeInvalid(f"saliency values must be 2-D, got {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class OcclusionConfig:
    """Sliding occlusion window geometry and the fill value.

    ``baseline`` is a scalar or one fill value per channel.
    """

    window: int = 64
    stride: int = 32
    baseline: Union[float, Sequence[float]] = 0.0


@dataclass(frozen=True)
class LrpParams:
    epsilon: float = 1e-6
    alpha: float = 2.0
    beta: float = 1.0


def window_starts(extent: int, window: int, stride: int) -> list:
    """Top-left offsets of occlusion windows along one axis.

    Steps by ``stride``; the final window is clamped flush with the border
    so every pixel is covered at least once.
    """
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def occlusion_map(model: ModelSpec, tile: np.ndarray, cfg: OcclusionConfig,
                  class_index: int, counter: Optional[PassCounter] = None) -> SaliencyMap:
    """Score drop when each window region is replaced by the baseline.

    Every pixel accumulates the drop of each window covering it and is
    averaged by its coverage count, which removes stride artifacts on the
    overlap pattern.
    """
    tile = np.asarray(tile, dtype=np.float64)
    if tuple(tile.shape) != tuple(model.input_shape):
        raise ShapeMismatch(f"tile {tile.shape} != model input {model.input_shape}")
    c, h, w = tile.shape
    if not (1 <= cfg.stride <= cfg.window <= min(h, w)):
        raise ConfigInvalid(f"need 1 <= stride <= window <= tile side, got "
                            f"stride={cfg.stride} window={cfg.window} side={min(h, w)}")
    fill = np.asarray(cfg.baseline, dtype=np.float64)
    if fill.ndim == 0:
        fill = np.full(c, float(fill))
    if fill.shape != (c,):
        raise ConfigInvalid(f"baseline must be a scalar or one value per channel ({c})")
    baseline = fill[:, None, None]

    base_score = engine.forward(model, tile, counter).logits[class_index]
    drops = np.zeros((h, w))
    coverage = np.zeros((h, w))
    perturbed = tile.copy()
    for y in window_starts(h, cfg.window, cfg.stride):
        for x in window_starts(w, cfg.window, cfg.stride):
            saved = perturbed[:, y:y + cfg.window, x:x + cfg.window].copy()
            perturbed[:, y:y + cfg.window, x:x + cfg.window] = baseline
            score = engine.forward(model, perturbed, counter).logits[class_index]
            perturbed[:, y:y + cfg.window, x:x + cfg.window] = saved
            drops[y:y + cfg.window, x:x + cfg.window] += base_score - score
            coverage[y:y + cfg.window, x:x + cfg.window] += 1.0
    return SaliencyMap(drops / coverage, Method.OCCLUSION, class_index)


def _check_trace(model: ModelSpec, trace: ForwardTrace):
    if trace.model is not model:
        raise TraceMismatch("trace was produced by a different model")


def _target_activation(model: ModelSpec, trace: ForwardTrace, target_layer: Optional[int]):
    idx = engine.default_target_index(model) if target_layer is None else target_layer
    if not (-1 <= idx < len(model.layers)):
        raise TraceMismatch(f"target layer {idx} out of range")
    act = trace.input if idx == -1 else trace.activations[idx]
    if act.ndim != 3:
        raise TraceMismatch(f"target layer {idx} output is not spatial: {act.shape}")
    return idx, act


def _finish(raw: np.ndarray, model: ModelSpec, method: Method, class_index: int,
            upsample: bool, interp: str) -> SaliencyMap:
    m = SaliencyMap(raw, method, class_index)
    if not upsample:
        return m
    _, h, w = model.input_shape
    return upsample_map(m, w, h, mode=interp)


def cam_map(model: ModelSpec, trace: ForwardTrace, class_index: int, *,
            upsample: bool = True, interp: str = "bilinear") -> SaliencyMap:
    """Class activation map: final Dense weights over the pre-pool features.

    Needs the global-pool-then-Dense tail. Output stays signed; negative
    regions mark evidence against the class. Costs no model passes beyond
    the shared forward.
    """
    _check_trace(model, trace)
    if not engine.is_cam_eligible(model):
        raise NotCamEligible("model does not end in a global pool followed by one Dense layer")
    if not (0 <= class_index < model.class_count):
        raise ClassOutOfRange(f"class_index {class_index} not in [0, {model.class_count})")
    _, acts = _target_activation(model, trace, None)
    head: Dense = model.layers[-1]
    raw = np.tensordot(head.weights[class_index], acts, axes=(0, 0))
    return _finish(raw, model, Method.CAM, class_index, upsample, interp)


def gradcampp_map(model: ModelSpec, trace: ForwardTrace, class_index: int, *,
                  target_layer: Optional[int] = None, upsample: bool = True,
                  interp: str = "bilinear",
                  counter: Optional[PassCounter] = None) -> SaliencyMap:
    """Gradient-weighted map with per-location channel weights.

    Uses the power-of-gradient form: alpha = g^2 / (2 g^2 + sum(A g^3))
    with 0/0 -> 0, channel weight w_k = sum(alpha * relu(g)), and the map
    relu(sum_k w_k A_k). Output is elementwise nonnegative.
    """
    _check_trace(model, trace)
    idx, acts = _target_activation(model, trace, target_layer)
    grads = engine.backward(model, trace, class_index, counter)
    g = grads[idx + 1]
    g2 = g * g
    denom = 2.0 * g2 + (acts * (g2 * g)).sum(axis=(1, 2), keepdims=True)
    alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0)
    weights = (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, acts, axes=(0, 0)), 0.0)
    return _finish(raw, model, Method.GRADCAMPP, class_index, upsample, interp)


def hirescam_map(model: ModelSpec, trace: ForwardTrace, class_index: int, *,
                 target_layer: Optional[int] = None, upsample: bool = True,
                 interp: str = "bilinear",
                 counter: Optional[PassCounter] = None) -> SaliencyMap:
    """Elementwise gradient-times-activation, summed over channels.

    No spatial averaging of the gradient and no rectification, so every
    location that increases the class score keeps its (signed) weight.
    """
    _check_trace(model, trace)
    idx, acts = _target_activation(model, trace, target_layer)
    grads = engine.backward(model, trace, class_index, counter)
    raw = (grads[idx + 1] * acts).sum(axis=0)
    return _finish(raw, model, Method.HIRESCAM, class_index, upsample, interp)


# --- composite relevance propagation -----------------------------------------

def _safe_div(num, den):
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def _relevance_dense(layer: Dense, x, rel, epsilon):
    v = x.reshape(-1)
    z = layer.weights @ v + layer.bias
    denom = np.where(z >= 0, z + epsilon, z - epsilon)
    s = rel.reshape(-1) / denom
    return (v * (layer.weights.T @ s)).reshape(x.shape)


def _relevance_conv(layer: Conv2D, x, rel, alpha, beta):
    xp, xn = np.maximum(x, 0.0), np.minimum(x, 0.0)
    wp, wn = np.maximum(layer.weights, 0.0), np.minimum(layer.weights, 0.0)
    bp, bn = np.maximum(layer.bias, 0.0), np.minimum(layer.bias, 0.0)

    def fwd(w, b, inp):
        clamped = Conv2D(layer.in_channels, layer.out_channels, layer.kernel_size,
                         weights=w, bias=b, stride=layer.stride, padding=layer.padding)
        return engine._conv_forward(clamped, inp)

    zero = np.zeros_like(layer.bias)
    z_pos = fwd(wp, bp, xp) + fwd(wn, zero, xn)
    z_neg = fwd(wn, bn, xp) + fwd(wp, zero, xn)
    # neurons with single-signed contributions cannot carry the alpha/beta
    # split; they pass their relevance proportionally (coefficient 1), which
    # keeps the layer conserving on bias-free nets
    a = np.where(z_neg != 0, alpha, 1.0)
    b = np.where(z_pos != 0, beta, -1.0)
    sp = a * _safe_div(rel, z_pos)
    sn = b * _safe_div(rel, z_neg)
    hw = x.shape[1:]

    def back(w, s):
        return engine.conv_input_grad(w, s, hw, layer.stride, layer.padding)

    pos = xp * back(wp, sp) + xn * back(wn, sp)
    neg = xp * back(wn, sn) + xn * back(wp, sn)
    return pos - neg


def lrp_composite_map(model: ModelSpec, trace: ForwardTrace, class_index: int,
                      params: LrpParams = LrpParams(),
                      counter: Optional[PassCounter] = None) -> SaliencyMap:
    """Propagate the class logit back to pixels under composite rules.

    Dense layers use the epsilon rule, conv layers the alpha/beta rule
    splitting positive and negative contributions, ReLU passes relevance
    unchanged, max pools are winner-take-all onto the recorded argmax and
    average pools split proportionally to contribution. The returned map
    is the per-pixel relevance summed over input channels; signed.
    """
    _check_trace(model, trace)
    if abs(params.alpha - params.beta - 1.0) > 1e-12:
        raise ParamInvalid(f"alpha - beta must equal 1, got {params.alpha} - {params.beta}")
    if params.epsilon <= 0:
        raise ParamInvalid(f"epsilon must be > 0, got {params.epsilon}")
    if not (0 <= class_index < model.class_count):
        raise ClassOutOfRange(f"class_index {class_index} not in [0, {model.class_count})")

    rel = np.zeros_like(trace.activations[-1])
    rel.reshape(-1)[class_index] = trace.logits[class_index]
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        x = trace.activations[i - 1] if i > 0 else trace.input
        if isinstance(layer, Dense):
            rel = _relevance_dense(layer, x, rel, params.epsilon)
        elif isinstance(layer, Conv2D):
            rel = _relevance_conv(layer, x, rel, params.alpha, params.beta)
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, MaxPool2D):
            c, h, w = x.shape
            out = np.zeros(c * h * w)
            chan = np.arange(c, dtype=np.int64)[:, None, None] * (h * w)
            np.add.at(out, (trace.pool_argmax[i] + chan).ravel(), rel.ravel())
            rel = out.reshape(c, h, w)
        elif isinstance(layer, GlobalMaxPool):
            c, h, w = x.shape
            out = np.zeros((c, h * w))
            out[np.arange(c), trace.pool_argmax[i]] = rel
            rel = out.reshape(c, h, w)
        elif isinstance(layer, GlobalAvgPool):
            totals = x.sum(axis=(1, 2), keepdims=True)
            rel = _safe_div(x, np.broadcast_to(totals, x.shape)) * rel[:, None, None]
        else:
            raise TraceMismatch(f"unsupported layer kind {type(layer).__name__}")
    if counter is not None:
        counter.count_backward()
    return SaliencyMap(rel.sum(axis=0), Method.LRP, class_index)


# --- resampling -----------------------------------------------------------------

def upsample_map(raw: SaliencyMap, target_w: int, target_h: int,
                 mode: str = "bilinear") -> SaliencyMap:
    """Resample a feature-resolution map up to input resolution.

    Bilinear with corner-aligned sampling by default ("nearest" is available
    for exactness checks). Interpolation is a convex combination, so the
    output range stays within the input range and sign is preserved.
    """
    v = raw.values
    h, w = v.shape
    if h < 1 or w < 1:
        raise ShapeInvalid("empty saliency map")
    if target_h < h or target_w < w:
        raise ShapeInvalid(f"target {target_w}x{target_h} smaller than map {w}x{h}")
    if (target_h, target_w) == (h, w):
        return SaliencyMap(v.copy(), raw.method, raw.class_index)

    def src_coords(n_src, n_dst):
        if n_src == 1:
            return np.zeros(n_dst)
        return np.arange(n_dst) * (n_src - 1) / (n_dst - 1)

    sy = src_coords(h, target_h)
    sx = src_coords(w, target_w)
    if mode == "nearest":
        out = v[np.rint(sy).astype(int)[:, None], np.rint(sx).astype(int)[None, :]]
        return SaliencyMap(out, raw.method, raw.class_index)
    if mode != "bilinear":
        raise ShapeInvalid(f"unknown interpolation mode {mode!r}")
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    out = ((1 - fy) * (1 - fx) * v[y0[:, None], x0[None, :]]
           + (1 - fy) * fx * v[y0[:, None], x1[None, :]]
           + fy * (1 - fx) * v[y1[:, None], x0[None, :]]
           + fy * fx * v[y1[:, None], x1[None, :]])
    return SaliencyMap(out, raw.method, raw.class_index)


# --- dispatch -------------------------------------------------------------------

def compute_map(method: Method, model: ModelSpec, tile: np.ndarray, class_index: int, *,
                occlusion: OcclusionConfig = OcclusionConfig(),
                lrp: LrpParams = LrpParams(),
                target_layer: Optional[int] = None,
                counter: Optional[PassCounter] = None) -> SaliencyMap:
    """Explain one tile with one method, including the shared forward pass."""
    if method is Method.OCCLUSION:
        return occlusion_map(model, tile, occlusion, class_index, counter)
    trace = engine.forward(model, tile, counter)
    if method is Method.CAM:
        return cam_map(model, trace, class_index)
    if method is Method.GRADCAMPP:
        return gradcampp_map(model, trace, class_index, target_layer=target_layer,
                             counter=counter)
    if method is Method.HIRESCAM:
        return hirescam_map(model, trace, class_index, target_layer=target_layer,
                            counter=counter)
    if method is Method.LRP:
        return lrp_composite_map(model, trace, class_index, lrp, counter)
    raise ConfigInvalid(f"unknown method {method!r}")
