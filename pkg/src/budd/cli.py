"""Command-line interface: one binary, one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import date as Date
from pathlib import Path

from budd import analyze, synth
from budd.cube import load_cube, save_cube, save_forest_mask
from budd.detector import load_detection_map, save_detection_map
from budd.errors import BuddError
from budd.model import PeriodSplit, summarize_define_period
from budd.pipeline import fit_models, load_config, run_pipeline
from budd.preprocess import derive_coherence_cube, derive_ndvi_cube, derive_ratio_cube
from budd.tv import DenoiseParams

log = logging.getLogger("budd.cli")

LETTER_TO_MODALITY = {"N": "ndvi", "B": "ratio", "C": "coherence"}


def _parse_subset(text: str) -> tuple[str, ...]:
    names = []
    for ch in text.upper():
        if ch not in LETTER_TO_MODALITY:
            raise argparse.ArgumentTypeError(
                f"bad modality letter {ch!r}; use a combination of N, B, C"
            )
        names.append(LETTER_TO_MODALITY[ch])
    return tuple(names)


def _parse_period(text: str) -> tuple[Date, Date]:
    try:
        a, b = text.split(":")
        return Date.fromisoformat(a), Date.fromisoformat(b)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"bad period {text!r}; expected YYYY-MM-DD:YYYY-MM-DD"
        ) from exc


def _parse_cubes(text: str) -> dict[str, Path]:
    """N=DIR,B=DIR,C=DIR or full names (ndvi=DIR,vv=DIR,...)."""
    out = {}
    for item in text.split(","):
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"bad cube spec {item!r}; expected NAME=DIR")
        key, path = item.split("=", 1)
        name = LETTER_TO_MODALITY.get(key.upper(), key.lower())
        out[name] = Path(path)
    return out


def _apply_overrides(config, args):
    cfg = config
    for attr in ("tile_size", "cloud_max_fraction", "percentile_level",
                 "min_forest_pixels", "min_define_obs"):
        flag = getattr(args, attr, None)
        if flag is not None:
            cfg = replace(cfg, **{attr: flag})
    if getattr(args, "workers", None) is not None:
        cfg = replace(cfg, worker_count=args.workers)
    if getattr(args, "modalities", None) is not None:
        cfg = replace(cfg, modality_subset=args.modalities)
    if getattr(args, "detrend", None) is not None:
        cfg = replace(cfg, apply_detrend=args.detrend)
    if getattr(args, "denoise", None) is not None:
        cfg = replace(cfg, apply_denoise=args.denoise)

    th = cfg.thresholds
    th_kwargs = {}
    for attr, key in (("flag", "flag"), ("confirm", "confirm"),
                      ("clear", "clear"), ("min_obs", "min_obs"), ("prior", "prior")):
        flag = getattr(args, attr, None)
        if flag is not None:
            th_kwargs[key] = flag
    if th_kwargs:
        cfg = replace(cfg, thresholds=replace(th, **th_kwargs))

    if getattr(args, "define", None) is not None or getattr(args, "monitor", None) is not None:
        split = cfg.split
        kwargs = {
            "define_start": split.define_start,
            "define_end": split.define_end,
            "monitor_start": split.monitor_start,
            "monitor_end": split.monitor_end,
        }
        if getattr(args, "define", None) is not None:
            kwargs["define_start"], kwargs["define_end"] = args.define
        if getattr(args, "monitor", None) is not None:
            kwargs["monitor_start"], kwargs["monitor_end"] = args.monitor
        cfg = replace(cfg, split=PeriodSplit(**kwargs))

    tv_kwargs = {}
    if getattr(args, "tv_lambda", None) is not None:
        tv_kwargs["lam"] = args.tv_lambda
    if getattr(args, "tv_iters", None) is not None:
        tv_kwargs["max_iters"] = args.tv_iters
    if getattr(args, "tv_tol", None) is not None:
        tv_kwargs["tol"] = args.tv_tol
    if tv_kwargs:
        cfg = replace(cfg, denoise={
            name: replace(params, **tv_kwargs) for name, params in cfg.denoise.items()
        })
    return cfg


def _add_config_flag(sub):
    sub.add_argument("--config", type=Path, default=None,
                     help="JSON config file; flags override its values")


def _add_tv_flags(sub):
    sub.add_argument("--tv-lambda", type=float, default=None,
                     help="TV regularization weight (all modalities)")
    sub.add_argument("--tv-iters", type=int, default=None, help="TV max iterations")
    sub.add_argument("--tv-tol", type=float, default=None, help="TV stopping tolerance")
    sub.add_argument("--detrend", action=argparse.BooleanOptionalAction, default=None,
                     help="per-tile forest-percentile detrending")
    sub.add_argument("--denoise", action=argparse.BooleanOptionalAction, default=None,
                     help="per-tile TV denoising")


def cmd_simulate(args) -> int:
    spec = synth.load_scenario(args.spec) if args.spec else synth.default_scenario()
    if args.seed is not None:
        spec.seed = args.seed
    cubes, truth, forest = synth.generate(spec)
    out = Path(args.out)
    for name, cube in cubes.items():
        save_cube(cube, out / name)
    save_detection_map(truth, out / "truth.i32", kind="truth")
    save_forest_mask(forest, out / "forest.u8")
    synth.save_scenario(spec, out / "scenario.json")
    print(f"wrote {len(cubes)} cubes, truth map and forest mask under {out}")
    return 0


def cmd_preprocess(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    if args.cloud_max is not None:
        config = replace(config, cloud_max_fraction=args.cloud_max)

    from budd.cube import filter_by_cloud
    from budd.preprocess import apply_mask, detrend_tiled

    if args.red or args.nir:
        if not (args.red and args.nir):
            raise BuddError("--red and --nir must be given together")
        cube = derive_ndvi_cube(load_cube(Path(args.red) / "manifest.json"),
                                load_cube(Path(args.nir) / "manifest.json"))
    elif args.vv or args.vh:
        if not (args.vv and args.vh):
            raise BuddError("--vv and --vh must be given together")
        cube = derive_ratio_cube(load_cube(Path(args.vv) / "manifest.json"),
                                 load_cube(Path(args.vh) / "manifest.json"),
                                 config.ratio_in_db)
    elif args.slc_pairs:
        cube = derive_coherence_cube(args.slc_pairs, config.coherence_window)
    elif args.in_dir:
        cube = load_cube(Path(args.in_dir) / "manifest.json")
    else:
        raise BuddError("give --in, --red/--nir, --vv/--vh or --slc-pairs")

    cube = filter_by_cloud(cube, config.cloud_max_fraction)
    cube = apply_mask(cube)
    if args.detrend:
        if not args.forest_mask:
            raise BuddError("--detrend needs --forest-mask")
        from budd.cube import load_forest_mask

        cube = detrend_tiled(cube, load_forest_mask(args.forest_mask),
                             config.percentile_level, config.min_forest_pixels,
                             config.tile_size)
    if args.denoise:
        from budd.pipeline import denoise_cube_tiled

        cube = denoise_cube_tiled(
            cube, config.denoise.get(cube.modality, DenoiseParams()), config.tile_size
        )
    manifest = save_cube(cube, args.out)
    print(f"wrote {cube.modality} cube with {len(cube)} scenes -> {manifest}")
    return 0


def cmd_fit(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    path = fit_models(config, _parse_cubes(args.cubes), args.forest_mask, args.out)
    print(f"wrote models -> {path}")
    return 0


def cmd_detect(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    result = run_pipeline(
        config,
        _parse_cubes(args.cubes),
        args.forest_mask,
        args.out,
        models_dir=args.models,
    )
    print(f"{len(result.alerts)} alerts -> {result.alerts_path}")
    return 0


def cmd_compare(args) -> int:
    a = load_detection_map(args.a)
    b = load_detection_map(args.b)
    cat, counts = analyze.compare_maps(a, b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analyze.save_comparison_map(cat, out / "comparison.u8")
    with open(out / "counts.json", "w") as fh:
        json.dump(counts.as_dict(), fh, indent=1)
    table = analyze.counts_table(counts.as_dict(), title="map agreement")
    (out / "counts.txt").write_text(table)
    analyze.render(cat, "agreement", out / "agreement.ppm")
    print(table, end="")
    return 0


def cmd_summarize(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    cubes = {
        name: load_cube(path / "manifest.json" if path.is_dir() else path)
        for name, path in _parse_cubes(args.cubes).items()
    }
    stats = summarize_define_period(cubes, config.split)
    doc = json.dumps(stats, indent=1)
    if args.out:
        Path(args.out).write_text(doc + "\n")
    width = max(len(n) for n in stats) if stats else 4
    print(f"{'modality':<{width}}  mean    std     min  max")
    for name, st in stats.items():
        print(f"{name:<{width}}  {st['mean']:<7.2f} {st['std']:<7.2f} {st['min']:<4d} {st['max']}")
    return 0


def cmd_render(args) -> int:
    if args.palette == "agreement":
        from budd.analyze import load_comparison_map

        arr = load_comparison_map(args.map)
    else:
        arr = load_detection_map(args.map)
    path = analyze.render(arr, args.palette, args.out)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="budd",
        description="Bayesian updating deforestation detection over raster time series",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scenario")
    p.add_argument("--spec", type=Path, default=None, help="scenario JSON (default built-in)")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="derive/filter/detrend one modality cube")
    _add_config_flag(p)
    p.add_argument("--in", dest="in_dir", type=Path, default=None,
                   help="existing single-modality cube directory")
    p.add_argument("--red", type=Path, default=None)
    p.add_argument("--nir", type=Path, default=None)
    p.add_argument("--vv", type=Path, default=None)
    p.add_argument("--vh", type=Path, default=None)
    p.add_argument("--slc-pairs", type=Path, default=None,
                   help="complex pair directory for coherence")
    p.add_argument("--cloud-max", type=float, default=None)
    p.add_argument("--forest-mask", type=Path, default=None)
    p.add_argument("--tile-size", type=int, default=None,
                   help="tile extent for detrend/denoise statistics")
    _add_tv_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_preprocess, detrend=None, denoise=None)

    p = sub.add_parser("fit", help="fit per-pixel forest models")
    _add_config_flag(p)
    p.add_argument("--cubes", required=True, help="N=DIR,B=DIR,C=DIR")
    p.add_argument("--forest-mask", type=Path, default=None)
    p.add_argument("--define", type=_parse_period, default=None,
                   help="defining period START:END")
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--min-define-obs", dest="min_define_obs", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    _add_tv_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("detect", help="run the alerting state machine")
    _add_config_flag(p)
    p.add_argument("--cubes", required=True, help="N=DIR,B=DIR,C=DIR")
    p.add_argument("--models", type=Path, default=None,
                   help="model directory from `budd fit` (default: fit in-run)")
    p.add_argument("--forest-mask", type=Path, default=None)
    p.add_argument("--monitor", type=_parse_period, default=None,
                   help="monitoring period START:END")
    p.add_argument("--define", type=_parse_period, default=None)
    p.add_argument("--modalities", type=_parse_subset, default=None,
                   help="subset letters, e.g. NBC, NB, BC, C")
    p.add_argument("--flag", type=float, default=None)
    p.add_argument("--confirm", type=float, default=None)
    p.add_argument("--clear", type=float, default=None)
    p.add_argument("--min-obs", dest="min_obs", type=int, default=None)
    p.add_argument("--prior", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--cloud-max", dest="cloud_max_fraction", type=float, default=None)
    _add_tv_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("compare", help="tri-category agreement of two maps")
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--b", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("summarize", help="defining-period observation counts")
    _add_config_flag(p)
    p.add_argument("--cubes", required=True)
    p.add_argument("--define", type=_parse_period, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("render", help="render a map to a lossless image")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--palette", choices=sorted(analyze.PALETTES), default="alerts")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except BuddError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
