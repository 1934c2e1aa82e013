"""Command line: compress, decompress, render, eval, synth, sweep."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec, pipeline, synth
from .appearance import ConfigurationError as AppearanceConfigError
from .appearance import load_checkpoint, save_checkpoint
from .model import EmptyCloudError, FormatError, GaussianCloud, load_ply, save_ply
from .optim import DivergenceError
from .splat import psnr, render, save_png, save_raw
from .svq import ConfigurationError as SvqConfigError

log = logging.getLogger("gs4c")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_CONTAINER = 0, 1, 2, 3, 4, 5


class FrameMismatchError(OSError):
    pass


def sidecar_path(ply_path: str | Path) -> Path:
    p = Path(ply_path)
    return p.with_name(p.stem + ".appearance.bin")


def load_model(path: str | Path):
    """(cloud, appearance model or None) from a container or a PLY with optional sidecar."""
    path = Path(path)
    if path.suffix == ".gs4c":
        return pipeline.decode_model(codec.read_container(path))
    cloud = load_ply(path)
    side = sidecar_path(path)
    appearance = load_checkpoint(side.read_bytes()) if side.exists() else None
    return cloud, appearance


def build_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.preset(args.preset) if args.preset else pipeline.PipelineConfig()
    if args.config:
        cfg = pipeline.load_config(args.config, cfg)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "scale", None):
        cfg = cfg.scaled(args.scale)
    return cfg


def synth_spec(args) -> synth.SyntheticSceneSpec:
    if getattr(args, "synth", None):
        try:
            d = json.loads(Path(args.synth).read_text())
        except json.JSONDecodeError as exc:
            raise pipeline.ConfigurationError(f"cannot parse scene spec {args.synth}: {exc}") from exc
        if args.seed is not None:
            d["seed"] = args.seed
        try:
            return synth.SyntheticSceneSpec(**d)
        except (TypeError, ValueError) as exc:
            raise pipeline.ConfigurationError(f"bad scene spec: {exc}") from exc
    h, w = (int(v) for v in args.size.lower().split("x"))
    try:
        return synth.SyntheticSceneSpec(seed=args.seed or 0, gaussian_count=args.gaussians,
                                        frame_count=args.frames, camera_count=args.cameras,
                                        height=h, width=w, ring_radius=args.radius, motion=args.motion)
    except ValueError as exc:
        raise pipeline.ConfigurationError(str(exc)) from exc


def inputs(args) -> tuple[GaussianCloud, list]:
    if args.frames_dir:
        if not args.input:
            raise pipeline.ConfigurationError("an input PLY is required with --frames")
        return load_ply(args.input), synth.load_frames(args.frames_dir)
    if args.synth:
        spec = synth_spec(args)
        _, pretrained, frames = synth.generate(spec)
        if args.input:
            pretrained = load_ply(args.input)
        return pretrained, frames
    raise pipeline.ConfigurationError("give --frames DIR or --synth SPEC.json")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_compress(args) -> int:
    cfg = build_config(args)
    cloud, frames = inputs(args)
    reports_fh = open(args.reports, "w") if args.reports else None

    def on_report(r):
        print(r.to_json(), file=sys.stderr, flush=True)
        if reports_fh:
            reports_fh.write(r.to_json() + "\n")

    try:
        result = pipeline.run(cloud, frames, cfg, checkpoint_dir=args.checkpoint_dir, on_report=on_report)
    finally:
        if reports_fh:
            reports_fh.close()
    codec.write_container(result.container, args.out)
    final = result.final
    print(json.dumps({"psnr": final.psnr, "count": final.count, "mb": result.breakdown.megabytes}))
    return EXIT_OK


def cmd_decompress(args) -> int:
    cloud, appearance = pipeline.decode_model(codec.read_container(args.input))
    save_ply(cloud, args.out)
    if appearance is not None:
        sidecar_path(args.out).write_bytes(save_checkpoint(appearance))
    return EXIT_OK


def cmd_render(args) -> int:
    cloud, appearance = load_model(args.model)
    frames = synth.load_frames(args.frames_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        img = render(cloud, f, appearance)
        if args.raw:
            save_raw(img, out / f"render_{i:04d}.raw")
        else:
            save_png(img, out / f"render_{i:04d}.png")
    return EXIT_OK


def evaluate(cloud, appearance, frames) -> dict:
    per_frame = []
    for i, f in enumerate(frames):
        img = render(cloud, f, appearance)
        if img.shape != f.image.shape:
            raise FrameMismatchError(f"frame {i}: rendered {img.shape} vs target {f.image.shape}")
        per_frame.append(psnr(img, f.image))
    return {"per_frame": per_frame, "mean_psnr": float(np.mean(per_frame)) if per_frame else float("nan"),
            "count": len(cloud)}


def cmd_eval(args) -> int:
    cloud, appearance = load_model(args.model)
    metrics = evaluate(cloud, appearance, synth.load_frames(args.frames_dir))
    if Path(args.model).suffix == ".gs4c":
        metrics["mb"] = codec.measure(Path(args.model).read_bytes()).megabytes
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = synth_spec(args)
    gt, pretrained, frames = synth.generate(spec)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    synth.write_frames(frames, out, spec)
    save_ply(gt, out / "gt.ply")
    save_ply(pretrained, out / "pretrained.ply")
    print(json.dumps({"frames": len(frames), "gaussians": len(gt), "dir": str(out)}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cloud, frames = inputs(args)
    rows = []
    for name in args.presets.split(","):
        args.preset = name.strip()
        cfg = build_config(args)
        result = pipeline.run(cloud, frames, cfg)
        metrics = evaluate(result.cloud, result.appearance, frames)
        rows.append({"preset": args.preset, "size_mb": result.breakdown.megabytes,
                     "psnr": metrics["mean_psnr"], "count": len(result.cloud)})
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=["preset", "size_mb", "psnr", "count"])
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config (.json or .toml)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preset", choices=["L", "M", "S", "T"], default=None)
    p.add_argument("--scale", type=float, default=None,
                   help="multiply every schedule length by this factor (e.g. 0.1 for quick runs)")


def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", nargs="?", help="pretrained cloud (.ply)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--frames", dest="frames_dir", help="frames directory with cameras.json")
    src.add_argument("--synth", help="synthetic scene spec (.json)")


def _add_scene(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gaussians", type=int, default=2000)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--cameras", type=int, default=16)
    p.add_argument("--size", default="64x64", help="HxW")
    p.add_argument("--radius", type=float, default=3.5)
    p.add_argument("--motion", choices=list(synth.MOTION_PRESETS), default="two-speed")


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gs4c", description="Compress dynamic 4D Gaussian scenes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="run the compression pipeline and write a container")
    _add_inputs(p)
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--reports", help="write stage reports as JSON lines")
    p.add_argument("--checkpoint-dir")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="container to PLY (+ appearance sidecar)")
    p.add_argument("input")
    p.add_argument("out")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("render", help="render a model at every camera of a frames directory")
    p.add_argument("model")
    p.add_argument("--frames", dest="frames_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--raw", action="store_true", help="planar float32 instead of PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR of a model against a frames directory")
    p.add_argument("model")
    p.add_argument("--frames", dest="frames_dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--synth", help="scene spec (.json) instead of the flags below")
    _add_scene(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="rate-distortion table over presets (CSV)")
    _add_inputs(p)
    _add_common(p)
    p.add_argument("--presets", default="L,M,S,T")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)
    return ap


def exit_code(exc: BaseException) -> int:
    chain = [exc]
    while chain[-1].__cause__ is not None:
        chain.append(chain[-1].__cause__)
    for e in chain:
        if isinstance(e, DivergenceError):
            return EXIT_DIVERGED
        if isinstance(e, codec.ContainerError):
            return EXIT_CONTAINER
        if isinstance(e, (pipeline.ConfigurationError, SvqConfigError, AppearanceConfigError)):
            return EXIT_CONFIG
        if isinstance(e, (OSError, FormatError, EmptyCloudError)):
            return EXIT_IO
    return EXIT_FAILURE


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = exit_code(exc)
        if code == EXIT_FAILURE:
            raise
        print(f"gs4c: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
