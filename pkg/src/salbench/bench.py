"""Timing, memory and pass-count benchmarking of the explanation methods,
plus the full evaluation suite that sweeps the quality metrics.

Per-method timing covers the model passes and the method's own
post-processing; file I/O and rendering stay outside the clock. Memory is
the process peak-RSS delta sampled at 100 ms while the method runs (this
artifact is CPU-based, so host RSS stands in for accelerator residency and
is labeled as such in the CSV). Pass counts come from instrumented
counters and are bit-reproducible; times vary run to run.

Timing runs single-threaded per method so rows are comparable; the
worker-pool path (`explain_tiles` with workers > 1) exists for throughput
jobs and is never used for timed rows.
"""

from __future__ import annotations

import csv
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import psutil
from threadpoolctl import threadpool_limits

from . import formats, metrics, slides
from .engine import ModelSpec, PassCounter
from .errors import (ConfigInvalid, DegenerateReference, MethodUnavailable,
                     NotCamEligible)
from .saliency import (LrpParams, Method, OcclusionConfig, SaliencyMap,
                       compute_map)

__all__ = [
    "MethodReport", "BenchmarkReport", "benchmark_method", "explain_tiles",
    "SuiteConfig", "SuiteResult", "run_suite", "BENCH_CSV_COLUMNS",
]

BENCH_CSV_COLUMNS = ["method", "tile_time_mean_s", "tile_time_std_s", "slide_time_s",
                     "peak_mem_bytes", "forwards_per_tile", "backwards_per_tile",
                     "tile_count"]

METHOD_ORDER = (Method.CAM, Method.GRADCAMPP, Method.HIRESCAM, Method.LRP,
                Method.OCCLUSION)


class _RssSampler:
    """Samples process RSS on a background thread; reports the peak delta."""

    def __init__(self, period: float = 0.1):
        self.period = period
        self._proc = psutil.Process()
        self._stop = threading.Event()
        self._baseline = 0
        self._peak = 0
        self._thread = None

    def _run(self):
        while not self._stop.wait(self.period):
            self._peak = max(self._peak, self._proc.memory_info().rss)

    def __enter__(self):
        self._baseline = self._proc.memory_info().rss
        self._peak = self._baseline
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self._peak = max(self._peak, self._proc.memory_info().rss)

    @property
    def peak_delta(self) -> int:
        return max(0, self._peak - self._baseline)


@dataclass
class MethodReport:
    """One Table-style row: timing, memory and pass counts for a method."""

    method: Method
    tile_time_mean_s: float = float("nan")
    tile_time_std_s: float = float("nan")
    slide_time_s: float = float("nan")
    peak_mem_bytes: int = 0
    forwards_per_tile: int = 0
    backwards_per_tile: int = 0
    tile_count: int = 0
    tile_times: List[float] = field(default_factory=list, repr=False)
    error: Optional[str] = None

    @property
    def tile_time_median_s(self) -> float:
        return statistics.median(self.tile_times) if self.tile_times else float("nan")

    def csv_row(self) -> list:
        return [self.method.value, repr(self.tile_time_mean_s), repr(self.tile_time_std_s),
                repr(self.slide_time_s), self.peak_mem_bytes, self.forwards_per_tile,
                self.backwards_per_tile, self.tile_count]


@dataclass
class BenchmarkReport:
    entries: List[MethodReport]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(BENCH_CSV_COLUMNS)
            for entry in self.entries:
                writer.writerow(entry.csv_row())


def benchmark_method(method: Method, model: ModelSpec, tiles: Sequence[np.ndarray], *,
                     class_index: int = 1,
                     occlusion: OcclusionConfig = OcclusionConfig(),
                     lrp: LrpParams = LrpParams(),
                     target_layer: Optional[int] = None,
                     max_tiles: Optional[int] = None,
                     mem_sample_period: float = 0.1,
                     ) -> Tuple[MethodReport, List[SaliencyMap]]:
    """Explain every tile with one method, timing each and counting passes.

    ``max_tiles`` restricts the run to the first N tiles (grid order) for
    desk-scale timing. When the method cannot run on the model the report
    carries the error and NaN times so the surrounding run can continue,
    and no maps are returned.
    """
    if not tiles:
        raise ConfigInvalid("no tiles to benchmark")
    subset = list(tiles[:max_tiles] if max_tiles else tiles)
    counter = PassCounter()
    times: List[float] = []
    maps: List[SaliencyMap] = []
    per_tile_counts = None
    try:
        # timing runs on one BLAS thread so rows are comparable across methods
        with _RssSampler(mem_sample_period) as sampler, threadpool_limits(limits=1):
            for tile in subset:
                before = counter.snapshot()
                t0 = time.perf_counter()
                maps.append(compute_map(method, model, tile, class_index,
                                        occlusion=occlusion, lrp=lrp,
                                        target_layer=target_layer, counter=counter))
                times.append(time.perf_counter() - t0)
                after = counter.snapshot()
                per_tile_counts = (after[0] - before[0], after[1] - before[1])
    except (NotCamEligible, MethodUnavailable) as exc:
        return MethodReport(method=method, error=str(exc)), []
    report = MethodReport(
        method=method,
        tile_time_mean_s=float(np.mean(times)),
        tile_time_std_s=float(np.std(times)),
        slide_time_s=float(np.sum(times)),
        peak_mem_bytes=sampler.peak_delta,
        forwards_per_tile=per_tile_counts[0],
        backwards_per_tile=per_tile_counts[1],
        tile_count=len(subset),
        tile_times=times,
    )
    return report, maps


def explain_tiles(method: Method, model: ModelSpec, tiles: Sequence[np.ndarray], *,
                  class_index: int = 1,
                  occlusion: OcclusionConfig = OcclusionConfig(),
                  lrp: LrpParams = LrpParams(),
                  target_layer: Optional[int] = None,
                  workers: int = 1) -> List[SaliencyMap]:
    """Untimed per-tile explanation, optionally on a worker pool.

    Results come back in tile order regardless of completion order.
    """
    def one(tile):
        return compute_map(method, model, tile, class_index, occlusion=occlusion,
                           lrp=lrp, target_layer=target_layer)

    if workers <= 1:
        return [one(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, tiles))


# --- the full suite -----------------------------------------------------------

@dataclass
class SuiteConfig:
    """Everything run_suite needs; validate() reports every bad field."""

    model_path: str
    slide_path: str
    out_dir: str
    annotation_path: Optional[str] = None
    methods: Tuple[Method, ...] = METHOD_ORDER
    run_metrics: Tuple[str, ...] = ("road", "wg_annotation", "wg_reference")
    seed: int = 0
    class_index: int = 1
    tile_size: int = slides.TILE_SIZE
    tile_stride: int = slides.TILE_STRIDE
    tissue_threshold: float = 0.08
    tissue_fraction: float = 0.05
    occlusion_window: int = 64
    occlusion_stride: int = 32
    occlusion_baseline: Optional[Sequence[float]] = None  # None = mean of explained tiles
    lrp_alpha: float = 2.0
    lrp_beta: float = 1.0
    lrp_epsilon: float = 1e-6
    road_percentiles: Tuple[float, ...] = metrics.ROAD_PERCENTILES
    road_sigma: float = 0.01
    road_positive_only: bool = False
    wg_percentiles: Tuple[float, ...] = metrics.WG_PERCENTILES
    wg_q: float = 20.0
    max_tiles: Optional[int] = None

    def validate(self):
        problems = []
        if not Path(self.model_path).is_file():
            problems.append(f"model_path: no such file {self.model_path!r}")
        if not Path(self.slide_path).is_file():
            problems.append(f"slide_path: no such file {self.slide_path!r}")
        if self.annotation_path is not None and not Path(self.annotation_path).is_file():
            problems.append(f"annotation_path: no such file {self.annotation_path!r}")
        needs_annotation = "wg_annotation" in self.run_metrics or self.road_positive_only
        if needs_annotation and self.annotation_path is None:
            problems.append("annotation_path: required by the requested metrics")
        for name in self.run_metrics:
            if name not in ("road", "wg_annotation", "wg_reference"):
                problems.append(f"run_metrics: unknown metric {name!r}")
        if not self.methods:
            problems.append("methods: need at least one")
        if self.tile_size < 1 or not (1 <= self.tile_stride <= self.tile_size):
            problems.append(f"tile_stride: need 1 <= stride <= tile_size, got "
                            f"{self.tile_stride}/{self.tile_size}")
        if not (1 <= self.occlusion_stride <= self.occlusion_window <= self.tile_size):
            problems.append(f"occlusion_window/stride: need 1 <= stride <= window <= "
                            f"tile_size, got {self.occlusion_stride}/{self.occlusion_window}")
        if abs(self.lrp_alpha - self.lrp_beta - 1.0) > 1e-12:
            problems.append(f"lrp_alpha/lrp_beta: alpha - beta must be 1, got "
                            f"{self.lrp_alpha}/{self.lrp_beta}")
        if self.lrp_epsilon <= 0:
            problems.append(f"lrp_epsilon: must be > 0, got {self.lrp_epsilon}")
        if not (0 < self.wg_q <= 100):
            problems.append(f"wg_q: must be in (0, 100], got {self.wg_q}")
        if self.road_sigma < 0:
            problems.append(f"road_sigma: must be >= 0, got {self.road_sigma}")
        if self.max_tiles is not None and self.max_tiles < 1:
            problems.append(f"max_tiles: must be >= 1, got {self.max_tiles}")
        for group in (self.road_percentiles, self.wg_percentiles):
            ps = list(group)
            if any(not (0 < p <= 100) for p in ps) or any(b <= a for a, b in zip(ps, ps[1:])):
                problems.append(f"percentiles: must be strictly increasing in (0, 100]: {ps}")
        if problems:
            raise ConfigInvalid(problems)


@dataclass
class SuiteResult:
    report: BenchmarkReport
    bench_csv: Path
    curve_csvs: Dict[str, Path]
    maps: Dict[Method, List[SaliencyMap]]
    grid: slides.TileGrid


def _mean_curve(curves: List[metrics.MetricCurve], metric, percentiles) -> metrics.MetricCurve:
    stacked = np.array([c.values for c in curves])
    return metrics.MetricCurve(metric, list(percentiles), stacked.mean(axis=0).tolist())


def run_suite(config: SuiteConfig) -> SuiteResult:
    """Benchmark every configured method and sweep the configured metrics.

    Emits one benchmark CSV plus one curve CSV per (metric, method) pair
    under ``config.out_dir``. Occlusion maps are computed once and reused
    as the reference for the agreement metric. All randomness is seeded.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = formats.load_model(config.model_path)
    if model.input_shape[1:] != (config.tile_size, config.tile_size):
        raise ConfigInvalid([f"tile_size: model expects {model.input_shape[1:]}, "
                             f"grid uses {config.tile_size}"])
    slide = formats.load_slide(config.slide_path)
    tissue = slides.detect_tissue(slide, config.tissue_threshold)
    grid = slides.tile_slide((slide.width, slide.height), tissue,
                             tile_size=config.tile_size, stride=config.tile_stride,
                             tissue_fraction=config.tissue_fraction)
    tiles = slides.cut_tissue_tiles(slide, grid)
    if not tiles:
        raise ConfigInvalid(["slide_path: no tissue tiles found"])
    if config.max_tiles:
        tiles = tiles[:config.max_tiles]

    if config.occlusion_baseline is None:
        baseline = np.mean([t.mean(axis=(1, 2)) for t in tiles], axis=0)
    else:
        baseline = np.asarray(config.occlusion_baseline, dtype=np.float64)
    occ_cfg = OcclusionConfig(config.occlusion_window, config.occlusion_stride, baseline)
    lrp = LrpParams(config.lrp_epsilon, config.lrp_alpha, config.lrp_beta)

    entries = []
    maps: Dict[Method, List[SaliencyMap]] = {}
    for method in config.methods:
        report, method_maps = benchmark_method(
            method, model, tiles, class_index=config.class_index,
            occlusion=occ_cfg, lrp=lrp)
        entries.append(report)
        if report.error is None:
            maps[method] = method_maps
    report = BenchmarkReport(entries)
    bench_csv = out_dir / "bench.csv"
    report.write_csv(bench_csv)

    annotation = None
    if config.annotation_path is not None:
        polygons = formats.load_annotation(config.annotation_path)
        annotation = slides.rasterize_annotation(polygons, (slide.width, slide.height))

    road_tiles = tiles
    road_indices = list(range(len(tiles)))
    if config.road_positive_only:
        origins = grid.tissue_origins()[:len(tiles)]
        road_indices = [i for i, origin in enumerate(origins)
                        if slides.label_tile(origin, annotation, grid.tile_size,
                                             center=grid.tile_size // 2)]
        road_tiles = [tiles[i] for i in road_indices]

    if "wg_reference" in config.run_metrics and Method.OCCLUSION not in maps:
        maps[Method.OCCLUSION] = explain_tiles(
            Method.OCCLUSION, model, tiles, class_index=config.class_index,
            occlusion=occ_cfg, lrp=lrp)

    curve_csvs: Dict[str, Path] = {}
    origins = grid.tissue_origins()[:len(tiles)]
    for method in config.methods:
        if method not in maps:
            continue  # method was unavailable; its bench row carries the error
        method_maps = maps[method]
        if "road" in config.run_metrics:
            curve = metrics.road_curve(model, road_tiles,
                                       [method_maps[i] for i in road_indices],
                                       config.class_index,
                                       percentiles=config.road_percentiles,
                                       noise_sigma=config.road_sigma, seed=config.seed)
            path = out_dir / f"road_{method.value}.csv"
            metrics.write_curve_csv(curve, path)
            curve_csvs[f"road_{method.value}"] = path
        if "wg_annotation" in config.run_metrics:
            curves = []
            for (x, y), m in zip(origins, method_maps):
                sub = annotation.inside[y:y + grid.tile_size, x:x + grid.tile_size]
                if not sub.any():
                    continue
                curves.append(metrics.weighting_game(m, sub, config.wg_percentiles))
            if curves:
                curve = _mean_curve(curves, metrics.MetricId.WG_ANNOTATION,
                                    config.wg_percentiles)
                path = out_dir / f"wg_annotation_{method.value}.csv"
                metrics.write_curve_csv(curve, path)
                curve_csvs[f"wg_annotation_{method.value}"] = path
        if "wg_reference" in config.run_metrics:
            curves = []
            for m, ref in zip(method_maps, maps[Method.OCCLUSION]):
                try:
                    curves.append(metrics.reference_agreement(m, ref,
                                                              config.wg_percentiles,
                                                              q=config.wg_q))
                except DegenerateReference:
                    continue
            if curves:
                curve = _mean_curve(curves, metrics.MetricId.WG_REFERENCE,
                                    config.wg_percentiles)
                path = out_dir / f"wg_reference_{method.value}.csv"
                metrics.write_curve_csv(curve, path)
                curve_csvs[f"wg_reference_{method.value}"] = path

    return SuiteResult(report=report, bench_csv=bench_csv, curve_csvs=curve_csvs,
                       maps=maps, grid=grid)
