"""Command-line interface.

Subcommands: generate, train, render, evaluate, gradcheck, sweep. Numeric
behavior lives entirely in the JSON config; flags only carry paths and
toggles. Exit codes: 0 success, 1 check failure, 2 usage/config error,
3 I/O error. Human-readable text goes to stderr, machine-readable output to
stdout or files. BAL_SEED overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from .config import RunConfig, config_to_dict, default_config, describe_config_keys, load_config
from .errors import BlurvatarError, ConfigError, DataError

logger = logging.getLogger("blurvatar")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def setup_runtime(threads: int) -> None:
    """Pin torch to one thread for reproducibility; numba threads do the
    per-pixel work and are bit-exact for any count."""
    torch.set_num_threads(1)
    if threads and threads > 0:
        import numba

        numba.set_num_threads(threads)


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = default_config()
        seed_env = os.environ.get("BAL_SEED")
        if seed_env is not None:
            cfg.seed = int(seed_env)
        return cfg
    return load_config(path)


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    setup_runtime(args.threads or cfg.threads)
    from .datagen import generate

    generate(cfg, args.out, float_dump=args.float_dump or None)
    print(os.path.join(args.out, "manifest.json"))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    setup_runtime(args.threads or cfg.threads)
    taus = [float(t) for t in args.taus.split(",")]
    from .datagen import blur_magnitude_sweep

    for d in blur_magnitude_sweep(cfg, args.out, taus, float_dump=args.float_dump or None):
        print(d)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.ablation:
        cfg.train.ablation = args.ablation
        cfg.validate()
    setup_runtime(args.threads or cfg.threads)
    from .diffopt import TrainState, load_dataset, train

    dataset = load_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    resume = TrainState.load(args.resume) if args.resume else None
    from .metrics import _json_safe

    log_path = os.path.join(args.out, "train_log.jsonl")
    with open(log_path, "a" if args.resume else "w", encoding="utf-8") as log_fh:
        def hook(entry):
            log_fh.write(json.dumps(_json_safe(entry), sort_keys=True) + "\n")
            log_fh.flush()
            logger.info("iter %6d  loss %.6f  l1 %.6f  reg %.6f  gaussians %d",
                        entry["iteration"], entry["loss"], entry["l1"],
                        entry["reg"], entry["n_gaussians"])

        state, _ = train(dataset, cfg, out_dir=args.out, resume=resume, log_hook=hook)
    final = os.path.join(args.out, "checkpoint_final.json")
    state.save(final)
    print(final)
    return EXIT_OK


def _parse_timesteps(spec: str) -> list[float]:
    """Either a comma list '0,0.5,1' or a grid 'grid:N' of N uniform times."""
    if spec.startswith("grid:"):
        n = int(spec.split(":", 1)[1])
        if n < 1:
            raise ConfigError("timestep grid must have at least one sample")
        return [0.0] if n == 1 else [i / (n - 1) for i in range(n)]
    return [float(x) for x in spec.split(",")]


def cmd_render(args) -> int:
    from .diffopt import TrainState
    from .imgio import quantize_f32, write_f32, write_png
    from .renderer import Camera, render_sharp

    state = TrainState.load(args.checkpoint)
    setup_runtime(args.threads or state.config.threads)
    manifest_path = os.path.join(args.dataset, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"missing manifest: {manifest_path}") from exc
    cams = {cd["id"]: Camera.from_dict(cd) for cd in manifest["cameras"]}
    if args.camera not in cams:
        raise ConfigError(f"unknown camera id {args.camera!r}; have {sorted(cams)}")
    cam = cams[args.camera]
    timesteps = _parse_timesteps(args.timesteps)
    frames = range(manifest["n_frames"]) if args.frames == "all" else [int(f) for f in args.frames.split(",")]
    bg = np.array(manifest.get("background", [0.0, 0.0, 0.0]))
    avatar = state.avatar()
    motion = state.motion_state()
    os.makedirs(args.out, exist_ok=True)
    count = 0
    with torch.no_grad():
        for fi in frames:
            for s in timesteps:
                img = quantize_f32(render_sharp(avatar, motion, fi, s, cam, bg).image.numpy())
                stem = os.path.join(args.out, f"{args.camera}_{fi:04d}_s{s:.4f}")
                write_png(stem + ".png", img)
                if args.float_dump:
                    write_f32(stem + ".f32", img)
                count += 1
    print(f"{count} images written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .diffopt import TrainState
    from .metrics import _json_safe, evaluate, write_csv, write_report

    state = TrainState.load(args.checkpoint)
    setup_runtime(args.threads or state.config.threads)
    report = evaluate(state, args.dataset)
    write_report(report, args.out)
    if args.csv:
        write_csv(report, os.path.splitext(args.out)[0] + ".csv")
    print(json.dumps(_json_safe({
        "psnr": report["aggregate"]["psnr"],
        "ssim": report["aggregate"]["ssim"],
        "middle_psnr": report["middle"]["psnr"],
        "non_middle_psnr": report["non_middle"]["psnr"],
    })))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    setup_runtime(args.threads or cfg.threads)
    from .diffopt import gradcheck

    report = gradcheck(cfg)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
    print(json.dumps({"max_rel_err": report["max_rel_err"],
                      "median_rel_err": report["median_rel_err"],
                      "passed": report["passed"]}))
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blurvatar",
        description="Sharp animatable Gaussian avatars from motion-blurred multi-view video.",
        epilog="Config keys (JSON, defaults shown):\n" + describe_config_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--threads", type=int, default=0,
                        help="cap rasterizer threads (results are identical for any value)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic blur dataset")
    p.add_argument("--config", help="run config JSON (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--float-dump", action="store_true", help="write .f32 dumps next to PNGs")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sweep", help="one dataset per exposure duration")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--taus", required=True, help="comma list of exposure durations in seconds")
    p.add_argument("--float-dump", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="optimize an avatar against a dataset")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--ablation", choices=["none", "no-interp", "no-nonrigid",
                                          "no-lbs-opt", "no-shape-opt", "no-reg"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="sharp renders from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset dir providing the cameras")
    p.add_argument("--camera", required=True)
    p.add_argument("--timesteps", default="0.5", help="comma list of s values or grid:N")
    p.add_argument("--frames", default="all", help="'all' or comma list of frame indices")
    p.add_argument("--out", required=True)
    p.add_argument("--float-dump", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="PSNR/SSIM report on held-out cameras")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--csv", action="store_true", help="also write a CSV next to the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--config")
    p.add_argument("--out", help="detailed JSON report path")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BlurvatarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
