"""Slide-level plumbing: tissue detection, overlapping tiling, polygon
annotation rasterization, tile labeling and stitching tile maps back into
a slide-resolution heatmap.

Coordinates are pixel (x, y) with the origin at the top-left; arrays are
indexed [y, x].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (DegeneratePolygon, DimMismatch, LengthMismatch, OutOfBounds,
                     SlideTooSmall, VertexOutOfBounds)
from .saliency import SaliencyMap

__all__ = [
    "SlideImage", "TileGrid", "AnnotationMask",
    "detect_tissue", "tile_slide", "rasterize_annotation", "label_tile",
    "stitch_maps", "cut_tile", "cut_tissue_tiles",
]

TILE_SIZE = 512
TILE_STRIDE = 256
CENTER_SIZE = 256


@dataclass
class SlideImage:
    """8-bit RGB slide raster plus informational resolution metadata."""

    pixels: np.ndarray  # (height, width, 3) uint8
    microns_per_pixel: Optional[float] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DimMismatch(f"slide must be (H, W, 3), got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TileGrid:
    """Overlapping tile geometry over one slide."""

    tile_size: int
    stride: int
    slide_width: int
    slide_height: int
    origins: List[Tuple[int, int]]       # (x, y) top-left corners
    tissue_flags: List[bool]

    def tissue_origins(self) -> List[Tuple[int, int]]:
        return [o for o, t in zip(self.origins, self.tissue_flags) if t]


@dataclass
class AnnotationMask:
    """Rasterized ground-truth region; source polygons are retained."""

    inside: np.ndarray  # (height, width) bool
    polygons: List[np.ndarray] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.inside.shape[0]

    @property
    def width(self) -> int:
        return self.inside.shape[1]


def detect_tissue(slide: SlideImage, threshold: float = 0.08) -> np.ndarray:
    """Per-pixel tissue flag.

    A pixel counts as tissue when its chroma (max - min channel, scaled to
    [0, 1]) reaches the threshold or when it is dark (mean intensity below
    200/255); that catches both stained and dark regions, while white
    background fails both tests.
    """
    rgb = slide.pixels.astype(np.int16)
    chroma = (rgb.max(axis=2) - rgb.min(axis=2)) / 255.0
    mean = rgb.mean(axis=2)
    return (chroma >= threshold) | (mean < 200.0)


def _grid_starts(extent: int, tile: int, stride: int) -> List[int]:
    starts = list(range(0, extent - tile + 1, stride))
    if starts[-1] != extent - tile:
        starts.append(extent - tile)  # clamp the border tile flush
    return starts


def tile_slide(slide_dims: Tuple[int, int], tissue_mask: np.ndarray,
               tile_size: int = TILE_SIZE, stride: int = TILE_STRIDE,
               tissue_fraction: float = 0.05) -> TileGrid:
    """Overlapping tile origins plus a tissue flag per tile.

    ``slide_dims`` is (width, height). Origins step by ``stride``; when the
    slide is not stride-aligned a final row/column is clamped flush with
    the border. A tile is flagged as tissue when at least
    ``tissue_fraction`` of its pixels are tissue.
    """
    width, height = slide_dims
    if width < tile_size or height < tile_size:
        raise SlideTooSmall(f"slide {width}x{height} smaller than tile {tile_size}")
    if tissue_mask.shape != (height, width):
        raise DimMismatch(f"tissue mask {tissue_mask.shape} != slide {(height, width)}")
    origins = [(x, y)
               for y in _grid_starts(height, tile_size, stride)
               for x in _grid_starts(width, tile_size, stride)]
    area = float(tile_size * tile_size)
    flags = [tissue_mask[y:y + tile_size, x:x + tile_size].sum() / area >= tissue_fraction
             for x, y in origins]
    return TileGrid(tile_size=tile_size, stride=stride, slide_width=width,
                    slide_height=height, origins=origins, tissue_flags=flags)


def _fill_polygon(poly: np.ndarray, out: np.ndarray):
    """Even-odd scanline fill; a pixel is inside iff its center is."""
    height, width = out.shape
    ys = poly[:, 1]
    y_lo = max(0, int(np.floor(ys.min() - 0.5)))
    y_hi = min(height - 1, int(np.ceil(ys.max())))
    x1s, y1s = poly[:, 0], poly[:, 1]
    x2s, y2s = np.roll(poly[:, 0], -1), np.roll(poly[:, 1], -1)
    keep = y1s != y2s
    x1s, y1s, x2s, y2s = x1s[keep], y1s[keep], x2s[keep], y2s[keep]
    for y in range(y_lo, y_hi + 1):
        yc = y + 0.5
        crossing = (np.minimum(y1s, y2s) <= yc) & (yc < np.maximum(y1s, y2s))
        if not crossing.any():
            continue
        t = (yc - y1s[crossing]) / (y2s[crossing] - y1s[crossing])
        xs = np.sort(x1s[crossing] + t * (x2s[crossing] - x1s[crossing]))
        for xa, xb in zip(xs[0::2], xs[1::2]):
            lo = max(0, int(np.ceil(xa - 0.5)))
            hi = min(width, int(np.ceil(xb - 0.5)))
            if hi > lo:
                out[y, lo:hi] = True


def rasterize_annotation(polygons: Sequence, slide_dims: Tuple[int, int]) -> AnnotationMask:
    """Union of even-odd filled polygons, sampled at pixel centers.

    ``polygons`` is a sequence of (N, 2) vertex arrays in slide pixel
    coordinates. Every vertex must lie within the slide and every polygon
    must have at least three vertices.
    """
    width, height = slide_dims
    inside = np.zeros((height, width), dtype=bool)
    kept = []
    for pi, poly in enumerate(polygons):
        poly = np.asarray(poly, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
            raise DegeneratePolygon(f"polygon {pi} needs >= 3 (x, y) vertices, got {poly.shape}")
        if ((poly[:, 0] < 0) | (poly[:, 0] > width)
                | (poly[:, 1] < 0) | (poly[:, 1] > height)).any():
            raise VertexOutOfBounds(f"polygon {pi} has a vertex outside {width}x{height}")
        _fill_polygon(poly, inside)
        kept.append(poly)
    return AnnotationMask(inside=inside, polygons=kept)


def label_tile(origin: Tuple[int, int], mask: AnnotationMask,
               tile_size: int = TILE_SIZE, center: int = CENTER_SIZE) -> bool:
    """True iff the tile's central region overlaps the annotation.

    The central ``center`` x ``center`` square sits ``(tile_size - center) / 2``
    pixels in from the tile origin.
    """
    x, y = origin
    if x < 0 or y < 0 or x + tile_size > mask.width or y + tile_size > mask.height:
        raise OutOfBounds(f"tile at {origin} exceeds mask {mask.width}x{mask.height}")
    off = (tile_size - center) // 2
    region = mask.inside[y + off:y + off + center, x + off:x + off + center]
    return bool(region.any())


def stitch_maps(grid: TileGrid, tile_maps: Sequence[SaliencyMap]) -> SaliencyMap:
    """Average overlapping tile maps into one slide-resolution map.

    Expects one map per tissue tile, in grid order. Pixels covered by no
    tissue tile are zero. Accumulation order is the grid order, so the
    result does not depend on how the per-tile maps were produced.
    """
    origins = grid.tissue_origins()
    if len(origins) != len(tile_maps):
        raise LengthMismatch(f"{len(origins)} tissue tiles vs {len(tile_maps)} maps")
    t = grid.tile_size
    acc = np.zeros((grid.slide_height, grid.slide_width))
    cov = np.zeros((grid.slide_height, grid.slide_width))
    method = tile_maps[0].method if tile_maps else None
    class_index = tile_maps[0].class_index if tile_maps else 0
    for (x, y), m in zip(origins, tile_maps):
        if m.values.shape != (t, t):
            raise DimMismatch(f"tile map {m.values.shape} != tile size {(t, t)}")
        acc[y:y + t, x:x + t] += m.values
        cov[y:y + t, x:x + t] += 1.0
    out = np.divide(acc, cov, out=np.zeros_like(acc), where=cov > 0)
    return SaliencyMap(out, method, class_index)


def cut_tile(slide: SlideImage, origin: Tuple[int, int], tile_size: int) -> np.ndarray:
    """Extract one tile as a float64 (3, T, T) tensor scaled to [0, 1]."""
    x, y = origin
    if x < 0 or y < 0 or x + tile_size > slide.width or y + tile_size > slide.height:
        raise OutOfBounds(f"tile at {origin} exceeds slide {slide.width}x{slide.height}")
    patch = slide.pixels[y:y + tile_size, x:x + tile_size, :]
    return patch.transpose(2, 0, 1).astype(np.float64) / 255.0


def cut_tissue_tiles(slide: SlideImage, grid: TileGrid) -> List[np.ndarray]:
    """All tissue tiles of a grid in grid order, as model-ready tensors."""
    return [cut_tile(slide, origin, grid.tile_size) for origin in grid.tissue_origins()]
