"""On-disk formats: model weight files, raw saliency grids (SALM) and
slide PNGs. All multi-byte integers are little-endian.

Model file layout:
    magic b"NNWB" | u32 version | u64 header length | header JSON |
    per parameterized layer, weights then bias: u64 element count + f64 data

SALM layout:
    magic b"SALM" | u32 width | u32 height | u32 reserved | f32 row-major grid
"""

from __future__ import annotations

import json
import struct
from typing import List

import numpy as np
from PIL import Image

from .engine import (Conv2D, Dense, GlobalAvgPool, GlobalMaxPool, MaxPool2D,
                     ModelSpec, ReLU, shape_propagate)
from .errors import CountMismatch, FormatError
from .saliency import SaliencyMap
from .slides import SlideImage

__all__ = [
    "save_model", "load_model", "save_saliency", "load_saliency",
    "load_slide", "save_slide", "save_annotation", "load_annotation",
]

MODEL_MAGIC = b"NNWB"
MODEL_VERSION = 1
SALM_MAGIC = b"SALM"


def _layer_header(layer) -> dict:
    if isinstance(layer, Conv2D):
        return {"kind": "Conv2D", "in_channels": layer.in_channels,
                "out_channels": layer.out_channels, "kernel_size": layer.kernel_size,
                "stride": layer.stride, "padding": layer.padding}
    if isinstance(layer, ReLU):
        return {"kind": "ReLU"}
    if isinstance(layer, MaxPool2D):
        return {"kind": "MaxPool2D", "kernel_size": layer.kernel_size, "stride": layer.stride}
    if isinstance(layer, GlobalMaxPool):
        return {"kind": "GlobalMaxPool"}
    if isinstance(layer, GlobalAvgPool):
        return {"kind": "GlobalAvgPool"}
    if isinstance(layer, Dense):
        return {"kind": "Dense", "in_features": layer.in_features,
                "out_features": layer.out_features}
    raise FormatError(f"unsupported layer kind {type(layer).__name__}")


def _layer_params(layer) -> List[np.ndarray]:
    if isinstance(layer, (Conv2D, Dense)):
        return [layer.weights, layer.bias]
    return []


def save_model(model: ModelSpec, path):
    """Write a model file; load_model(save_model(m)) is bit-identical."""
    header = {
        "version": MODEL_VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": [_layer_header(l) for l in model.layers],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for layer in model.layers:
            for arr in _layer_params(layer):
                data = np.ascontiguousarray(arr, dtype="<f8")
                fh.write(struct.pack("<Q", data.size))
                fh.write(data.tobytes())


def _expected_shapes(desc: dict, index: int) -> List[tuple]:
    kind = desc.get("kind")
    if kind == "Conv2D":
        k = desc["kernel_size"]
        return [(desc["out_channels"], desc["in_channels"], k, k), (desc["out_channels"],)]
    if kind == "Dense":
        return [(desc["out_features"], desc["in_features"]), (desc["out_features"],)]
    if kind in ("ReLU", "MaxPool2D", "GlobalMaxPool", "GlobalAvgPool"):
        return []
    raise FormatError(f"layer {index}: unknown kind {kind!r}")


def load_model(path) -> ModelSpec:
    """Read a model file, validating counts against the header."""
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise FormatError(f"{path}: bad magic, not a model file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != MODEL_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable header: {exc}") from exc
        if header.get("version") != MODEL_VERSION:
            raise FormatError(f"{path}: header version {header.get('version')} != {MODEL_VERSION}")

        layers = []
        for i, desc in enumerate(header["layers"]):
            arrays = []
            for shape in _expected_shapes(desc, i):
                expected = int(np.prod(shape))
                raw = fh.read(8)
                if len(raw) < 8:
                    raise CountMismatch(f"layer {i} ({desc['kind']}): blob truncated")
                (count,) = struct.unpack("<Q", raw)
                if count != expected:
                    raise CountMismatch(
                        f"layer {i} ({desc['kind']}): {count} elements in blob, "
                        f"header implies {expected}")
                data = fh.read(count * 8)
                if len(data) < count * 8:
                    raise CountMismatch(f"layer {i} ({desc['kind']}): blob truncated")
                arrays.append(np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape))
            kind = desc["kind"]
            if kind == "Conv2D":
                layers.append(Conv2D(desc["in_channels"], desc["out_channels"],
                                     desc["kernel_size"], weights=arrays[0], bias=arrays[1],
                                     stride=desc["stride"], padding=desc["padding"]))
            elif kind == "ReLU":
                layers.append(ReLU())
            elif kind == "MaxPool2D":
                layers.append(MaxPool2D(desc["kernel_size"], desc["stride"]))
            elif kind == "GlobalMaxPool":
                layers.append(GlobalMaxPool())
            elif kind == "GlobalAvgPool":
                layers.append(GlobalAvgPool())
            elif kind == "Dense":
                layers.append(Dense(desc["in_features"], desc["out_features"],
                                    weights=arrays[0], bias=arrays[1]))
        if fh.read(1):
            raise CountMismatch(f"{path}: trailing data after the last layer blob")

    model = ModelSpec(layers=tuple(layers), input_shape=tuple(header["input_shape"]),
                      class_count=int(header["class_count"]))
    shape_propagate(model)
    return model


def save_saliency(saliency: SaliencyMap, path):
    """Write a SALM grid; values are stored as 32-bit floats."""
    values = np.ascontiguousarray(saliency.values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(SALM_MAGIC)
        fh.write(struct.pack("<III", w, h, 0))
        fh.write(values.tobytes())


def load_saliency(path) -> SaliencyMap:
    with open(path, "rb") as fh:
        if fh.read(4) != SALM_MAGIC:
            raise FormatError(f"{path}: bad magic, not a SALM file")
        w, h, _reserved = struct.unpack("<III", fh.read(12))
        data = fh.read(w * h * 4)
        if len(data) < w * h * 4:
            raise CountMismatch(f"{path}: grid truncated ({len(data)} of {w * h * 4} bytes)")
    values = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(h, w)
    return SaliencyMap(values)


def load_slide(path) -> SlideImage:
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return SlideImage(pixels=pixels)


def save_slide(slide: SlideImage, path):
    Image.fromarray(slide.pixels, mode="RGB").save(path, format="PNG")


def save_annotation(polygons, path):
    """Write polygons as {"polygons": [[[x, y], ...], ...]} in slide coords."""
    doc = {"polygons": [np.asarray(p, dtype=float).tolist() for p in polygons]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_annotation(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "polygons" not in doc:
        raise FormatError(f"{path}: missing top-level 'polygons' key")
    return [np.asarray(p, dtype=np.float64) for p in doc["polygons"]]
