"""Command-line surface.

Subcommands:
    fixture   generate a synthetic slide, annotation and detector model
    tile      preview the tile grid of a slide
    explain   explain one tile image or a whole slide with one method
    evaluate  run the metric sweeps, writing curve CSVs
    bench     run the timing/pass-count benchmark, writing the report CSV

Exit codes: 0 success, 2 configuration/usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import bench, fixtures, formats, slides
from .errors import ConfigInvalid, FormatError, SalbenchError, SpecInvalid
from .saliency import LrpParams, Method, OcclusionConfig, compute_map

METHOD_NAMES = {m.value: m for m in Method}


def _parse_method(name: str) -> Method:
    if name not in METHOD_NAMES:
        raise ConfigInvalid(f"unknown method {name!r}; valid methods: "
                            + ", ".join(sorted(METHOD_NAMES)))
    return METHOD_NAMES[name]


def _parse_methods(spec: str):
    return tuple(_parse_method(n.strip()) for n in spec.split(",") if n.strip())


def _parse_percentiles(spec: str):
    try:
        return tuple(float(p) for p in spec.split(","))
    except ValueError as exc:
        raise ConfigInvalid(f"bad percentile list {spec!r}: {exc}") from exc


def _add_common(parser):
    parser.add_argument("--model", required=True, help="model weight file")
    parser.add_argument("--out-dir", default=".", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--class-index", type=int, default=1,
                        help="class whose score is explained (default: positive class)")
    parser.add_argument("--occlusion-window", type=int, default=64)
    parser.add_argument("--occlusion-stride", type=int, default=32)
    parser.add_argument("--occlusion-baseline", type=float, nargs="*", default=None,
                        help="fill value(s); default is the mean of the explained tiles")
    parser.add_argument("--lrp-alpha", type=float, default=2.0)
    parser.add_argument("--lrp-beta", type=float, default=1.0)
    parser.add_argument("--lrp-epsilon", type=float, default=1e-6)


def _occlusion_cfg(args, tiles=None) -> OcclusionConfig:
    if args.occlusion_baseline is not None:
        baseline = args.occlusion_baseline
        baseline = baseline[0] if len(baseline) == 1 else baseline
    elif tiles:
        baseline = np.mean([t.mean(axis=(1, 2)) for t in tiles], axis=0)
    else:
        baseline = 0.0
    return OcclusionConfig(args.occlusion_window, args.occlusion_stride, baseline)


def _cmd_fixture(args) -> int:
    spec = fixtures.FixtureSpec(width=args.width, height=args.height,
                                lesion_count=args.lesions,
                                full_tissue=args.full_tissue)
    fixture = fixtures.generate_fixture(args.seed, spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats.save_slide(fixture.slide, out / "slide.png")
    formats.save_annotation(fixture.polygons, out / "annotation.json")
    from PIL import Image
    Image.fromarray(fixture.lesion_mask.astype(np.uint8) * 255, mode="L").save(
        out / "lesion_mask.png", format="PNG")
    if args.model_out:
        formats.save_model(fixtures.lesion_detector(args.tile_size), out / args.model_out)
    print(f"wrote slide.png, annotation.json, lesion_mask.png to {out}")
    return 0


def _cmd_tile(args) -> int:
    slide = formats.load_slide(args.slide)
    tissue = slides.detect_tissue(slide, args.tissue_threshold)
    grid = slides.tile_slide((slide.width, slide.height), tissue,
                             tile_size=args.tile_size, stride=args.tile_stride,
                             tissue_fraction=args.tissue_fraction)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "tiles.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "tissue"])
        for (x, y), flag in zip(grid.origins, grid.tissue_flags):
            writer.writerow([x, y, int(flag)])
    n_tissue = sum(grid.tissue_flags)
    print(f"{len(grid.origins)} tiles ({n_tissue} tissue) of {grid.tile_size}px "
          f"at stride {grid.stride}; wrote {out / 'tiles.csv'}")
    return 0


def _cmd_explain(args) -> int:
    from .render import render_heatmap

    model = formats.load_model(args.model)
    method = _parse_method(args.method)
    lrp = LrpParams(args.lrp_epsilon, args.lrp_alpha, args.lrp_beta)
    image = formats.load_slide(args.image)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem

    tile_hw = model.input_shape[1]
    if (image.height, image.width) == (tile_hw, tile_hw):
        tile = slides.cut_tile(image, (0, 0), tile_hw)
        cfg = _occlusion_cfg(args, [tile])
        result = compute_map(method, model, tile, args.class_index,
                             occlusion=cfg, lrp=lrp)
    else:
        tissue = slides.detect_tissue(image, args.tissue_threshold)
        grid = slides.tile_slide((image.width, image.height), tissue,
                                 tile_size=tile_hw, stride=args.tile_stride or tile_hw // 2,
                                 tissue_fraction=args.tissue_fraction)
        tiles = slides.cut_tissue_tiles(image, grid)
        if not tiles:
            raise ConfigInvalid("no tissue tiles found in the slide")
        cfg = _occlusion_cfg(args, tiles)
        maps = bench.explain_tiles(method, model, tiles, class_index=args.class_index,
                                   occlusion=cfg, lrp=lrp, workers=args.workers)
        result = slides.stitch_maps(grid, maps)

    salm_path = out / f"{stem}_{method.value}.salm"
    png_path = out / f"{stem}_{method.value}.png"
    formats.save_saliency(result, salm_path)
    render_heatmap(result, png_path)
    print(f"wrote {salm_path} and {png_path}")
    return 0


def _suite_config(args, run_metrics) -> bench.SuiteConfig:
    baseline = None
    if args.occlusion_baseline is not None:
        b = args.occlusion_baseline
        baseline = b[0] if len(b) == 1 else tuple(b)
    return bench.SuiteConfig(
        model_path=args.model, slide_path=args.slide, out_dir=args.out_dir,
        annotation_path=getattr(args, "annotation", None),
        methods=_parse_methods(args.methods), run_metrics=run_metrics,
        seed=args.seed, class_index=args.class_index,
        tile_size=args.tile_size, tile_stride=args.tile_stride,
        tissue_threshold=args.tissue_threshold, tissue_fraction=args.tissue_fraction,
        occlusion_window=args.occlusion_window, occlusion_stride=args.occlusion_stride,
        occlusion_baseline=baseline,
        lrp_alpha=args.lrp_alpha, lrp_beta=args.lrp_beta, lrp_epsilon=args.lrp_epsilon,
        road_percentiles=_parse_percentiles(args.road_percentiles),
        wg_percentiles=_parse_percentiles(args.percentiles),
        wg_q=args.wg_q, max_tiles=args.max_tiles,
    )


def _cmd_evaluate(args) -> int:
    run_metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    result = bench.run_suite(_suite_config(args, run_metrics))
    print(f"wrote {result.bench_csv} and {len(result.curve_csvs)} curve CSVs")
    return 0


def _cmd_bench(args) -> int:
    result = bench.run_suite(_suite_config(args, ()))
    for entry in result.report.entries:
        if entry.error:
            print(f"{entry.method.value}: unavailable ({entry.error})")
        else:
            print(f"{entry.method.value}: {entry.tile_time_mean_s:.4f} s/tile over "
                  f"{entry.tile_count} tiles, {entry.forwards_per_tile} forwards/tile")
    print(f"wrote {result.bench_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salbench",
                                     description="Tile-classifier saliency toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="generate a synthetic slide")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--lesions", type=int, default=4)
    p.add_argument("--full-tissue", action="store_true")
    p.add_argument("--tile-size", type=int, default=64,
                   help="input size of the emitted detector model")
    p.add_argument("--model-out", default=None,
                   help="also write a lesion-detector model under this name")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=_cmd_fixture)

    p = sub.add_parser("tile", help="preview a slide's tile grid")
    p.add_argument("--slide", required=True)
    p.add_argument("--tile-size", type=int, default=slides.TILE_SIZE)
    p.add_argument("--tile-stride", type=int, default=slides.TILE_STRIDE)
    p.add_argument("--tissue-threshold", type=float, default=0.08)
    p.add_argument("--tissue-fraction", type=float, default=0.05)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("explain", help="explain a tile or slide with one method")
    _add_common(p)
    p.add_argument("--image", required=True, help="tile or slide PNG")
    p.add_argument("--method", required=True)
    p.add_argument("--tile-stride", type=int, default=None)
    p.add_argument("--tissue-threshold", type=float, default=0.08)
    p.add_argument("--tissue-fraction", type=float, default=0.05)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_explain)

    for name, fn, extra in (("evaluate", _cmd_evaluate, True), ("bench", _cmd_bench, False)):
        p = sub.add_parser(name, help=f"run the {name} suite")
        _add_common(p)
        p.add_argument("--slide", required=True)
        p.add_argument("--methods", default=",".join(m.value for m in bench.METHOD_ORDER))
        p.add_argument("--tile-size", type=int, default=slides.TILE_SIZE)
        p.add_argument("--tile-stride", type=int, default=slides.TILE_STRIDE)
        p.add_argument("--tissue-threshold", type=float, default=0.08)
        p.add_argument("--tissue-fraction", type=float, default=0.05)
        p.add_argument("--max-tiles", type=int, default=None)
        p.add_argument("--road-percentiles", default="10,20,30,40,50")
        p.add_argument("--percentiles", default=",".join(str(q) for q in range(5, 105, 5)))
        p.add_argument("--wg-q", type=float, default=20.0)
        if extra:
            p.add_argument("--annotation", default=None)
            p.add_argument("--metrics", default="road,wg_annotation,wg_reference")
        p.set_defaults(func=fn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigInvalid, SpecInvalid, FormatError) as exc:
        print(f"salbench: {exc}", file=sys.stderr)
        return 2
    except SalbenchError as exc:
        print(f"salbench: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"salbench: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
