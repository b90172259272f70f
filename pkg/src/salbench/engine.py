"""Minimal deterministic CNN engine.

Forward passes cache every intermediate activation plus max-pool argmax
indices; the backward pass produces exact reverse-mode gradients of one
logit with respect to every cached activation (including the input).
Supported layer kinds: Conv2D, ReLU, MaxPool2D, GlobalMaxPool,
GlobalAvgPool, Dense.

Conventions:
    * activation tensors are float64 numpy arrays, channel-first (C, H, W)
    * Dense weights are (out_features, in_features); a Dense layer applied
      to a spatial activation flattens it row-major
    * max pools break ties by the lowest flat row-major input index, so
      traces and everything built on them are bit-reproducible
    * models and traces are immutable after construction; forward/backward
      are pure functions and safe to call concurrently
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ClassOutOfRange,
    InconsistentShapes,
    NonFinite,
    ShapeMismatch,
    TraceMismatch,
)

__all__ = [
    "Conv2D", "ReLU", "MaxPool2D", "GlobalMaxPool", "GlobalAvgPool", "Dense",
    "Layer", "ModelSpec", "ForwardTrace", "PassCounter",
    "forward", "backward", "shape_propagate", "is_cam_eligible",
    "default_target_index", "conv_input_grad", "build_small_vgg",
]


# --- layer specs ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_size: int
    weights: np.ndarray  # (out, in, k, k)
    bias: np.ndarray     # (out,)
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True, eq=False)
class ReLU:
    pass


@dataclass(frozen=True, eq=False)
class MaxPool2D:
    kernel_size: int
    stride: int


@dataclass(frozen=True, eq=False)
class GlobalMaxPool:
    pass


@dataclass(frozen=True, eq=False)
class GlobalAvgPool:
    pass


@dataclass(frozen=True, eq=False)
class Dense:
    in_features: int
    out_features: int
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)


Layer = Union[Conv2D, ReLU, MaxPool2D, GlobalMaxPool, GlobalAvgPool, Dense]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Ordered layer list plus the input contract.

    The final activation, flattened row-major, must have exactly
    ``class_count`` elements; :func:`forward` reports it as the logits.
    """

    layers: tuple
    input_shape: tuple  # (channels, height, width)
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Everything one forward pass computed.

    ``activations[i]`` is the output of ``model.layers[i]``. ``pool_argmax``
    maps a pooling layer's index to the flat spatial index (per channel and,
    for windowed pools, per output location) of the winning input element.
    """

    model: ModelSpec
    input: np.ndarray
    activations: tuple
    pool_argmax: dict
    logits: np.ndarray


class PassCounter:
    """Thread-safe forward/backward pass tally for instrumented runs."""

    def __init__(self):
        self._lock = threading.Lock()
        self.forwards = 0
        self.backwards = 0

    def count_forward(self):
        with self._lock:
            self.forwards += 1

    def count_backward(self):
        with self._lock:
            self.backwards += 1

    def snapshot(self):
        with self._lock:
            return (self.forwards, self.backwards)


# --- shape propagation -------------------------------------------------------

def _conv_out_hw(h, w, k, s, p):
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def shape_propagate(model: ModelSpec) -> list:
    """Derive each layer's output shape, validating parameters as it goes.

    Raises :class:`InconsistentShapes` naming the first failing layer.
    """
    shape = tuple(model.input_shape)
    if len(shape) != 3 or any(d < 1 for d in shape):
        raise InconsistentShapes(-1, f"input shape {shape} is not a valid (C, H, W)")
    shapes = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2D):
            if layer.kernel_size < 1 or layer.stride < 1 or layer.padding < 0:
                raise InconsistentShapes(i, "kernel/stride must be >= 1, padding >= 0")
            if len(shape) != 3:
                raise InconsistentShapes(i, f"Conv2D needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            if c != layer.in_channels:
                raise InconsistentShapes(i, f"expects {layer.in_channels} channels, got {c}")
            want = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
            if layer.weights.shape != want:
                raise InconsistentShapes(i, f"weights {layer.weights.shape} != {want}")
            if layer.bias.shape != (layer.out_channels,):
                raise InconsistentShapes(i, f"bias {layer.bias.shape} != ({layer.out_channels},)")
            oh, ow = _conv_out_hw(h, w, layer.kernel_size, layer.stride, layer.padding)
            if oh < 1 or ow < 1:
                raise InconsistentShapes(i, f"kernel {layer.kernel_size} too large for {h}x{w}")
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, MaxPool2D):
            if layer.kernel_size < 1 or layer.stride < 1:
                raise InconsistentShapes(i, "kernel/stride must be >= 1")
            if len(shape) != 3:
                raise InconsistentShapes(i, f"MaxPool2D needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            if layer.kernel_size > h or layer.kernel_size > w:
                raise InconsistentShapes(i, f"pool window {layer.kernel_size} exceeds {h}x{w}")
            oh = (h - layer.kernel_size) // layer.stride + 1
            ow = (w - layer.kernel_size) // layer.stride + 1
            shape = (c, oh, ow)
        elif isinstance(layer, (GlobalMaxPool, GlobalAvgPool)):
            if len(shape) != 3:
                raise InconsistentShapes(i, f"global pool needs a (C, H, W) input, got {shape}")
            shape = (shape[0],)
        elif isinstance(layer, Dense):
            n = int(np.prod(shape))
            if n != layer.in_features:
                raise InconsistentShapes(i, f"expects {layer.in_features} features, got {n}")
            if layer.weights.shape != (layer.out_features, layer.in_features):
                raise InconsistentShapes(
                    i, f"weights {layer.weights.shape} != ({layer.out_features}, {layer.in_features})")
            if layer.bias.shape != (layer.out_features,):
                raise InconsistentShapes(i, f"bias {layer.bias.shape} != ({layer.out_features},)")
            shape = (layer.out_features,)
        else:
            raise InconsistentShapes(i, f"unsupported layer kind {type(layer).__name__}")
        shapes.append(shape)
    if not shapes:
        raise InconsistentShapes(-1, "model has no layers")
    if int(np.prod(shapes[-1])) != model.class_count:
        raise InconsistentShapes(
            len(model.layers) - 1,
            f"final output {shapes[-1]} does not flatten to class_count={model.class_count}")
    return shapes


def is_cam_eligible(model: ModelSpec) -> bool:
    """True iff the model ends in a global pool followed by a single Dense."""
    if len(model.layers) < 2:
        return False
    return (isinstance(model.layers[-2], (GlobalMaxPool, GlobalAvgPool))
            and isinstance(model.layers[-1], Dense))


def default_target_index(model: ModelSpec) -> int:
    """Layer index whose output the CAM-family methods explain by default.

    For pool-then-dense tails this is the activation feeding the global pool
    (so CAM, GradCAM++ and HiResCAM all read the same feature map); otherwise
    the last Conv2D layer. Index -1 stands for the model input, which feeds
    the pool when the pool is the first layer.
    """
    if is_cam_eligible(model):
        return len(model.layers) - 3
    for i in range(len(model.layers) - 1, -1, -1):
        if isinstance(model.layers[i], Conv2D):
            return i
    raise InconsistentShapes(-1, "model has no convolutional layer to target")


# --- forward ------------------------------------------------------------------

# conv scratch buffers are large and short-lived; reusing them per thread
# avoids re-faulting tens of MB of fresh pages on every pass
_scratch = threading.local()


def _scratch_buf(tag: str, shape, zeroed: bool = False) -> np.ndarray:
    cache = getattr(_scratch, "bufs", None)
    if cache is None:
        cache = _scratch.bufs = {}
    key = (tag, shape)
    buf = cache.get(key)
    if buf is None:
        buf = cache[key] = np.zeros(shape) if zeroed else np.empty(shape)
    elif zeroed:
        buf.fill(0.0)
    return buf


def _pad(x, p):
    if p == 0:
        return x
    c, h, w = x.shape
    out = _scratch_buf("pad", (c, h + 2 * p, w + 2 * p))
    out[:, :p, :] = 0.0
    out[:, h + p:, :] = 0.0
    out[:, :, :p] = 0.0
    out[:, :, w + p:] = 0.0
    out[:, p:p + h, p:p + w] = x
    return out


def _conv_forward(layer: Conv2D, x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    if c != layer.in_channels:
        raise ShapeMismatch(f"Conv2D expects {layer.in_channels} channels, got {c}")
    k, s = layer.kernel_size, layer.stride
    xp = _pad(x, layer.padding)
    if xp.shape[1] < k or xp.shape[2] < k:
        raise ShapeMismatch(f"kernel {k} larger than padded input {xp.shape[1:]}")
    oh, ow = _conv_out_hw(h, w, k, s, layer.padding)
    # im2col into one contiguous buffer, then a single matmul
    cols = _scratch_buf("cols", (c * k * k, oh, ow))
    r = 0
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                cols[r] = xp[ci, ki:ki + s * oh:s, kj:kj + s * ow:s]
                r += 1
    out = layer.weights.reshape(layer.out_channels, -1) @ cols.reshape(c * k * k, -1)
    return out.reshape(layer.out_channels, oh, ow) + layer.bias[:, None, None]


def _maxpool_forward(layer: MaxPool2D, x: np.ndarray):
    c, h, w = x.shape
    k, s = layer.kernel_size, layer.stride
    if k > h or k > w:
        raise ShapeMismatch(f"pool window {k} exceeds input {h}x{w}")
    if k == 2 and s == 2:
        # fast path for the common non-overlapping 2x2 pool; the where-chain
        # picks the first maximum in window row-major order, matching the
        # lowest-flat-index tie rule of the general path
        oh, ow = h // 2, w // 2
        a = x[:, 0:2 * oh:2, 0:2 * ow:2]
        b = x[:, 0:2 * oh:2, 1:2 * ow:2]
        cq = x[:, 1:2 * oh:2, 0:2 * ow:2]
        d = x[:, 1:2 * oh:2, 1:2 * ow:2]
        out = np.maximum(np.maximum(a, b), np.maximum(cq, d))
        idx = np.where(out == a, 0, np.where(out == b, 1, np.where(out == cq, 2, 3)))
    else:
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        oh, ow = win.shape[1], win.shape[2]
        flat = win.reshape(c, oh, ow, k * k)
        # argmax over a row-major window keeps the lowest flat input index on ties
        idx = flat.argmax(axis=3)
        out = np.take_along_axis(flat, idx[..., None], axis=3)[..., 0]
    oy = np.arange(oh, dtype=np.int64)[None, :, None]
    ox = np.arange(ow, dtype=np.int64)[None, None, :]
    in_flat = (oy * s + idx // k) * w + (ox * s + idx % k)
    return out, in_flat


def forward(model: ModelSpec, x: np.ndarray, counter: Optional[PassCounter] = None) -> ForwardTrace:
    """Run the model, caching activations, pool argmaxes and logits.

    Deterministic: identical inputs yield bit-identical traces. Raises
    :class:`ShapeMismatch` if the input does not match ``model.input_shape``
    and :class:`NonFinite` (with the layer index) if any layer produces
    NaN or Inf.
    """
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) != tuple(model.input_shape):
        raise ShapeMismatch(f"input {x.shape} != model input {model.input_shape}")
    activations = []
    pool_argmax = {}
    cur = x
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2D):
            cur = _conv_forward(layer, cur)
        elif isinstance(layer, ReLU):
            cur = np.maximum(cur, 0.0)
        elif isinstance(layer, MaxPool2D):
            cur, am = _maxpool_forward(layer, cur)
            pool_argmax[i] = am
        elif isinstance(layer, GlobalMaxPool):
            flat = cur.reshape(cur.shape[0], -1)
            am = flat.argmax(axis=1)
            cur = flat[np.arange(flat.shape[0]), am]
            pool_argmax[i] = am
        elif isinstance(layer, GlobalAvgPool):
            cur = cur.mean(axis=(1, 2))
        elif isinstance(layer, Dense):
            v = cur.reshape(-1)
            if v.shape[0] != layer.in_features:
                raise ShapeMismatch(f"Dense expects {layer.in_features} features, got {v.shape[0]}")
            cur = layer.weights @ v + layer.bias
        else:
            raise ShapeMismatch(f"unsupported layer kind {type(layer).__name__}")
        if not np.isfinite(cur).all():
            raise NonFinite(i)
        activations.append(cur)
    logits = activations[-1].reshape(-1)
    if logits.shape[0] != model.class_count:
        raise ShapeMismatch(
            f"final activation has {logits.shape[0]} values, class_count is {model.class_count}")
    if counter is not None:
        counter.count_forward()
    return ForwardTrace(model=model, input=x, activations=tuple(activations),
                        pool_argmax=pool_argmax, logits=logits)


# --- backward -------------------------------------------------------------------

def conv_input_grad(weights: np.ndarray, grad_out: np.ndarray, in_hw, stride: int, padding: int) -> np.ndarray:
    """Gradient of a Conv2D output w.r.t. its input (transposed convolution).

    Shared with the relevance-propagation rules, which run it with
    sign-clamped weights.
    """
    o, c, k, _ = weights.shape
    h, w = in_hw
    oh, ow = grad_out.shape[1], grad_out.shape[2]
    gxp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    for ki in range(k):
        for kj in range(k):
            contrib = np.tensordot(weights[:, :, ki, kj], grad_out, axes=(0, 0))
            gxp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += contrib
    if padding:
        return gxp[:, padding:padding + h, padding:padding + w]
    return gxp


def _layer_backward(layer, inp, out, g, argmax):
    if isinstance(layer, Conv2D):
        return conv_input_grad(layer.weights, g, inp.shape[1:], layer.stride, layer.padding)
    if isinstance(layer, ReLU):
        return g * (out > 0)
    if isinstance(layer, MaxPool2D):
        c, h, w = inp.shape
        gx = np.zeros(c * h * w)
        chan = np.arange(c, dtype=np.int64)[:, None, None] * (h * w)
        np.add.at(gx, (argmax + chan).ravel(), g.ravel())
        return gx.reshape(c, h, w)
    if isinstance(layer, GlobalMaxPool):
        c, h, w = inp.shape
        gx = np.zeros((c, h * w))
        gx[np.arange(c), argmax] = g
        return gx.reshape(c, h, w)
    if isinstance(layer, GlobalAvgPool):
        c, h, w = inp.shape
        return np.broadcast_to(g[:, None, None] / (h * w), (c, h, w)).copy()
    if isinstance(layer, Dense):
        return (layer.weights.T @ g).reshape(inp.shape)
    raise ShapeMismatch(f"unsupported layer kind {type(layer).__name__}")


def backward(model: ModelSpec, trace: ForwardTrace, class_index: int,
             counter: Optional[PassCounter] = None) -> list:
    """Exact gradients of ``logits[class_index]`` w.r.t. every activation.

    Returns ``grads`` with ``grads[0]`` the gradient w.r.t. the model input
    and ``grads[i + 1]`` the gradient w.r.t. ``trace.activations[i]``.
    Max pools route gradient only to their recorded argmax elements; ReLU
    gates on the forward sign. Deterministic.
    """
    if trace.model is not model:
        raise TraceMismatch("trace was produced by a different model")
    if not (0 <= class_index < model.class_count):
        raise ClassOutOfRange(f"class_index {class_index} not in [0, {model.class_count})")
    n = len(model.layers)
    grads = [None] * (n + 1)
    g = np.zeros_like(trace.activations[-1])
    g.reshape(-1)[class_index] = 1.0
    grads[n] = g
    for i in range(n - 1, -1, -1):
        inp = trace.activations[i - 1] if i > 0 else trace.input
        g = _layer_backward(model.layers[i], inp, trace.activations[i], g,
                            trace.pool_argmax.get(i))
        grads[i] = g
    if counter is not None:
        counter.count_backward()
    return grads


# --- canonical desk-scale network -----------------------------------------------

def build_small_vgg(input_hw: int = 64, seed: int = 0, class_count: int = 2,
                    pool: str = "max") -> ModelSpec:
    """VGG-style tile classifier small enough for desk-scale runs.

    Three conv/relu/maxpool blocks widening 3 -> 8 -> 16 -> 32, one more
    3x3 conv at width 32, then a global pool and a single Dense head.
    Weights are seeded uniform in [-0.5, 0.5]; biases zero. ``input_hw``
    must be divisible by 8. ``pool`` selects the global pool kind
    ("max" or "avg").
    """
    if input_hw % 8 != 0 or input_hw < 16:
        raise ValueError("input_hw must be a multiple of 8 and at least 16")
    rng = np.random.default_rng(seed)

    def conv(cin, cout):
        w = rng.uniform(-0.5, 0.5, size=(cout, cin, 3, 3))
        return Conv2D(cin, cout, 3, weights=w, bias=np.zeros(cout), stride=1, padding=1)

    layers = []
    widths = [3, 8, 16, 32]
    for cin, cout in zip(widths, widths[1:]):
        layers += [conv(cin, cout), ReLU(), MaxPool2D(2, 2)]
    layers += [conv(32, 32), ReLU()]
    layers.append(GlobalMaxPool() if pool == "max" else GlobalAvgPool())
    dw = rng.uniform(-0.5, 0.5, size=(class_count, 32))
    layers.append(Dense(32, class_count, weights=dw, bias=np.zeros(class_count)))
    model = ModelSpec(layers=tuple(layers), input_shape=(3, input_hw, input_hw),
                      class_count=class_count)
    shape_propagate(model)
    return model
