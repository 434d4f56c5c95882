"""Command-line entry point: ``trips <command> [options]``.

Exit codes: 0 success, 1 invalid configuration, 2 I/O failure, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cost as costmod
from .backbone import (
    ConfigError,
    ModelConfig,
    SelectionConfig,
    ViTTrips,
    encode,
    patch_embed,
    single_stream_forward,
)
from .bench import benchmark, speedups
from .gradcheck import check_selection_pipeline, valid_instance
from .io import (
    FormatError,
    RunConfig,
    emit_trace_json,
    load_image_ppm,
    load_run_config,
    load_tensor,
    save_image_ppm,
    save_overlay,
    synthetic_image,
    trace_records,
)
from .kernels import SeededRng, seeded_init
from .selection import GuidanceMode, GuidanceSource

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3
SEEDED_TEXT_TOKENS = 4


class CheckFailed(Exception):
    pass


def _csv_ints(text: str) -> tuple[int, ...]:
    return () if text.strip().lower() in ("", "none", "-") else tuple(int(x) for x in text.split(","))


def _csv_floats(text: str) -> tuple[float, ...]:
    return () if text.strip().lower() in ("", "none", "-") else tuple(float(x) for x in text.split(","))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--seed", type=int, help="weight seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=[m.value for m in GuidanceSource])
    p.add_argument("--no-itf", action="store_true", default=None, help="drop inattentive tokens instead of fusing")
    p.add_argument("--no-td-att", action="store_true", default=None, help="score by the image [CLS] instead of the text")
    p.add_argument("--locations", type=_csv_ints, help="selection layers, e.g. 5,10 (or 'none')")
    p.add_argument("--rates", type=_csv_floats, help="keep rates, e.g. 0.7,0.7")
    p.add_argument("--image-size", type=int)
    p.add_argument("--flops-convention", choices=[c.value for c in costmod.FlopsConvention], default="mac")


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    cfg.update(
        seed=args.seed,
        out=args.out,
        mode=args.mode,
        no_itf=args.no_itf,
        no_td_att=args.no_td_att,
        locations=args.locations,
        rates=args.rates,
        image_size=args.image_size,
    )
    # one rate (given or left over from the config) applies to every location
    if len(cfg.rates) != len(cfg.locations) and (len(cfg.rates) == 1 or args.rates is None):
        cfg.rates = (cfg.rates[0] if cfg.rates else 0.7,) * len(cfg.locations)
    cfg.model_config()
    return cfg


def _inputs(cfg: RunConfig, model_cfg: ModelConfig):
    if cfg.image:
        image = load_image_ppm(cfg.image)
    else:
        image = synthetic_image(model_cfg.image_size, cfg.image_seed)
    guidance = None
    if model_cfg.mode.source is GuidanceSource.MULTIMODAL_CLS:
        # single-stream runs take text tokens [m x d] instead of one guidance vector
        if cfg.guidance:
            guidance = np.atleast_2d(load_tensor(cfg.guidance))
        else:
            guidance = seeded_init((SEEDED_TEXT_TOKENS, model_cfg.width), 1.0, SeededRng(cfg.guidance_seed))
    elif model_cfg.mode.needs_guidance_vector:
        if cfg.guidance:
            guidance = load_tensor(cfg.guidance).ravel()
        else:
            guidance = seeded_init(model_cfg.width, 1.0, SeededRng(cfg.guidance_seed))
    return image, guidance


def _run(model_cfg: ModelConfig, image, guidance):
    model = ViTTrips.from_seed(model_cfg)
    if model_cfg.mode.source is GuidanceSource.MULTIMODAL_CLS:
        return single_stream_forward(model, guidance, patch_embed(image, model))
    return encode(model, image, guidance)


def _out_dir(cfg: RunConfig) -> Path | None:
    if not cfg.out:
        return None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_forward(args) -> int:
    cfg = _run_config(args)
    model_cfg = cfg.model_config()
    image, guidance = _inputs(cfg, model_cfg)
    seq, trace = _run(model_cfg, image, guidance)
    print(f"final length: {len(seq)}")
    print("layer lengths: " + " ".join(str(n) for n in trace.lengths))
    for rec in trace_records(trace):
        print(
            f"layer {rec['layer']}: n={rec['n_candidates']} k={rec['k']} "
            f"-> {rec['n_after']} tokens, fused mass {rec['fused_mass']:.6f}"
        )
    out = _out_dir(cfg)
    if out:
        emit_trace_json(trace, out / "trace.jsonl")
    return EXIT_OK


def cmd_visualize(args) -> int:
    cfg = _run_config(args)
    model_cfg = cfg.model_config()
    if not model_cfg.selection.locations:
        raise ConfigError("visualize needs at least one selection layer")
    out = _out_dir(cfg) or Path(".")
    image, guidance = _inputs(cfg, model_cfg)
    _, trace = _run(model_cfg, image, guidance)
    save_image_ppm(image, out / "input.ppm")
    for layer in trace.selection_layers:
        path = out / f"overlay_layer{layer:02d}.ppm"
        save_overlay(image, trace, layer, path, model_cfg.patch_size, args.dim)
        print(f"layer {layer}: {int(trace.kept_masks[layer].sum())} bright cells -> {path}")
    emit_trace_json(trace, out / "trace.jsonl")
    return EXIT_OK


def _cost_config(args) -> costmod.CostConfig:
    locations = (5, 10) if args.locations is None else args.locations
    rates = args.rates if args.rates is not None else (0.7,) * len(locations)
    if len(rates) == 1 and len(locations) > 1:
        rates = rates * len(locations)
    selection = SelectionConfig(locations, rates)
    return costmod.CostConfig.for_image(
        args.image_size or 384,
        selection=selection,
        convention=costmod.FlopsConvention(args.flops_convention),
        text_len=args.text_len,
    )


def cmd_cost(args) -> int:
    cfg = _cost_config(args)
    report = costmod.model_flops(cfg)
    baseline = costmod.model_flops(replace(cfg, selection=SelectionConfig()))
    unit = 1e9
    print(f"convention: {report.convention.value}")
    print(f"overall keep rate: {report.keep_rate}%")
    print("layer lengths: " + " ".join(str(n) for n in report.lengths))
    print(f"vision: {report.vision / unit:.2f} G")
    print(f"text: {report.text / unit:.2f} G")
    print(f"fusion: {report.fusion / unit:.2f} G")
    print(f"total: {report.total / unit:.2f} G")
    print(f"ratio to no-selection baseline: {report.ratio_to(baseline):.4f}")
    return EXIT_OK


def _read_rows(path) -> list[costmod.SweepRow]:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 3:
            raise ConfigError(f"sweep row needs locations, rates, image size: {line!r}")
        try:
            locs, rates, size = _csv_ints(parts[0]), _csv_floats(parts[1]), int(parts[2])
        except ValueError as exc:
            raise ConfigError(f"bad sweep row {line!r}: {exc}") from exc
        if len(rates) == 1 and len(locs) > 1:
            rates = rates * len(locs)
        rows.append(costmod.SweepRow(locs, rates, size))
    return rows


def cmd_sweep(args) -> int:
    if args.rows:
        rows = _read_rows(args.rows)
    else:
        rows = {
            "locations": costmod.LOCATION_SWEEP,
            "resolutions": costmod.RESOLUTION_SWEEP,
            "all": costmod.LOCATION_SWEEP + costmod.RESOLUTION_SWEEP,
        }[args.preset]
    base = costmod.CostConfig(convention=costmod.FlopsConvention(args.flops_convention), text_len=args.text_len)
    results = costmod.sweep(rows, base)
    print("locations\trates\timage_size\tkeep_rate\tfinal_length\ttotal_G\tratio")
    for r in results:
        print(
            f"{','.join(map(str, r.row.locations)) or '-'}\t"
            f"{','.join(f'{x:g}' for x in r.row.rates) or '-'}\t"
            f"{r.row.image_size}\t{r.report.keep_rate}\t{r.report.lengths[-1]}\t"
            f"{r.report.total / 1e9:.2f}\t{r.ratio:.4f}"
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(json.dumps([r.as_dict() for r in results], indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    modes = {
        "text-cls": GuidanceMode(),
        "image-cls": GuidanceMode(GuidanceSource.IMAGE_CLS),
        "no-itf": GuidanceMode(disable_fusion=True),
    }
    selected = list(modes) if args.variant == "all" else [args.variant]
    seed = args.seed or 0
    failed = 0
    reports = []
    for name in selected:
        for trial in range(args.trials):
            inst = valid_instance(seed + trial, modes[name], eps=args.eps)
            report = check_selection_pipeline(inst, eps=args.eps, tolerance=args.tolerance)
            reports.append({"variant": name, "trial": trial, **report.as_dict()})
            status = "ok" if report.passed else "FAIL"
            failed += not report.passed
            print(
                f"{name} trial {trial}: max rel err {report.max_error:.3e} "
                f"tie margin {report.tie_margin:.3e} {status}"
            )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(reports, indent=2))
    print(f"{len(reports) - failed}/{len(reports)} passed")
    if failed:
        raise CheckFailed(f"{failed} gradient checks failed")
    return EXIT_OK


def cmd_bench(args) -> int:
    size = args.image_size or 384
    model_cfg = ModelConfig(image_size=size, seed=args.seed or 0)
    locations = (5, 10) if args.locations is None else args.locations
    rate_sets = [args.rates] if args.rates else [(r,) * len(locations) for r in (1.0, 0.9, 0.7, 0.5)]
    selections = {}
    for rates in rate_sets:
        if len(rates) == 1 and len(locations) > 1:
            rates = rates * len(locations)
        selections["@" + ",".join(f"{r:g}" for r in rates)] = SelectionConfig(locations, rates)
    results = benchmark(model_cfg, selections, repeats=args.repeats, warmup=args.warmup)
    ratio = speedups(results)
    print(f"tokens: {model_cfg.num_tokens}, width {model_cfg.width}, repeats {args.repeats}, warmup {args.warmup}")
    for r in results:
        print(f"{r.label}\tmedian {r.median * 1e3:.2f} ms\tfinal length {r.final_length}\tspeedup {ratio[r.label]:.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps([r.as_dict() for r in results], indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trips", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="run the backbone and report sequence lengths")
    _add_common(p)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("visualize", help="write kept-patch overlays per selection layer")
    _add_common(p)
    p.add_argument("--dim", type=float, default=0.25, help="brightness factor for pruned patches")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("cost", help="analytic FLOPs for one configuration")
    _add_common(p)
    p.add_argument("--text-len", type=int, default=40)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("sweep", help="FLOPs table over location/rate/resolution rows")
    _add_common(p)
    p.add_argument("--rows", help="file of 'locations<TAB>rates<TAB>image_size' rows")
    p.add_argument("--preset", choices=["locations", "resolutions", "all"], default="all")
    p.add_argument("--text-len", type=int, default=40)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    _add_common(p)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--variant", choices=["text-cls", "image-cls", "no-itf", "all"], default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="wall-clock forwards with and without selection")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
