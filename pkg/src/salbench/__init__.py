"""Saliency explanation engine and evaluation benchmark for tiled
slide-image CNN classifiers.

Subpackages:
    engine    forward/backward CNN core with activation caching
    saliency  occlusion, CAM, GradCAM++, HiResCAM and composite relevance maps
    metrics   ROAD faithfulness and Weighting-Game localization/agreement
    slides    tissue detection, tiling, annotation rasterization, stitching
    bench     timing/memory/pass-count harness and the full metric suite
    formats   model files, SALM saliency grids, slide PNGs, annotation JSON
    fixtures  seeded synthetic slides with planted lesions
"""

from .engine import (ForwardTrace, ModelSpec, PassCounter, backward,
                     build_small_vgg, forward, shape_propagate)
from .saliency import (LrpParams, Method, OcclusionConfig, SaliencyMap, cam_map,
                       compute_map, gradcampp_map, hirescam_map,
                       lrp_composite_map, occlusion_map, upsample_map)
from .metrics import (MetricCurve, MetricId, reference_agreement, road_curve,
                      road_impute, top_percent_mask, weighting_game)
from .slides import (AnnotationMask, SlideImage, TileGrid, detect_tissue,
                     label_tile, rasterize_annotation, stitch_maps, tile_slide)
from .bench import (BenchmarkReport, MethodReport, SuiteConfig, benchmark_method,
                    run_suite)
from .formats import (load_annotation, load_model, load_saliency, load_slide,
                      save_annotation, save_model, save_saliency, save_slide)
from .fixtures import Fixture, FixtureSpec, generate_fixture, lesion_detector
from .render import render_heatmap

__version__ = "0.1.0"
