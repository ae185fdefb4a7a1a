"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 transport failure, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import eeg, metrics, report
from .errors import EegSplatError, LoadError, NumericError, TransportError, ValidationError
from .gaussians import Camera, GaussianBatch, render
from .gaussians.io import read_ply, read_points, write_png, write_ply, write_raw
from .layout import fallback_layout, load_lexicon, parse_layout_json, request_layout
from .sds import OptConfig, guidance_for_layout_targets, optimize, write_loss_log

log = logging.getLogger("eegsplat")


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from None


def cmd_ingest(args) -> int:
    seg = eeg.load_segment(args.inp, args.format, default_rate=args.rate)
    if args.band:
        seg = eeg.bandpass_filter(seg, *args.band)
    if args.window:
        seg = eeg.crop_window(seg, *args.window)
    eeg.save_segment(seg, args.out, args.out_format)
    log.info("wrote %d x %d segment to %s", seg.n_channels, seg.n_samples, args.out)
    return 0


def cmd_layout(args) -> int:
    lexicon = load_lexicon(args.lexicon) if args.lexicon else None
    if args.endpoint:
        try:
            layout = request_layout(args.endpoint, args.text, timeout=args.timeout)
        except (TransportError, ValidationError) as exc:
            if not args.fallback:
                raise
            log.warning("layout service failed (%s); using fallback", exc)
            layout = fallback_layout(args.text, lexicon)
    else:
        layout = fallback_layout(args.text, lexicon)
    for w in layout.warnings():
        log.warning(w)
    Path(args.out).write_text(layout.to_json())
    return 0


def _load_config(args) -> OptConfig:
    cfg = OptConfig.from_json(_read_text(args.config)) if args.config else OptConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = replace(cfg, steps_object=args.steps[0], steps_scene=args.steps[1])
    return cfg


def cmd_optimize(args) -> int:
    layout = parse_layout_json(_read_text(args.layout))
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    centroid = np.mean([o.box.center for o in layout.objects], axis=0)
    cams = cfg.cameras(centroid)
    if args.targets:
        gt = read_ply(args.targets)
        g_obj, g_scene = guidance_for_layout_targets(gt, layout, cams, cfg.background)
    elif cfg.steps_object or cfg.steps_scene:
        raise ValidationError("optimisation steps requested but no --targets given to guide them")
    else:
        g_obj = g_scene = None

    # run stage by stage so every stage boundary gets a checkpoint
    init_state = optimize(layout, g_obj, g_scene, replace(cfg, steps_object=0, steps_scene=0), cams)
    write_ply(init_state.combined(), out / "init.ply")
    obj_state = optimize(layout, g_obj, g_scene, replace(cfg, steps_scene=0), cams,
                         initial=init_state.gaussians)
    write_ply(obj_state.combined(), out / "object_stage.ply")
    state = optimize(layout, g_obj, g_scene, replace(cfg, steps_object=0), cams,
                     initial=obj_state.gaussians)
    state.log[:0] = obj_state.log
    final = state.combined()
    if not all(np.isfinite(a).all() for a in final.params().values()):
        raise NumericError("optimisation diverged to non-finite parameters")
    write_ply(final, out / "scene.ply")
    write_loss_log(state.log, out / "loss_log.csv")
    (out / "config.json").write_text(cfg.to_json() + "\n")
    if not args.no_plot:
        if state.log:
            report.plot_loss_log(state.log, out / "loss_curve.png")
        views = [render(final, cam, cfg.background).pixels for cam in cams]
        report.plot_views(views, out / "views.png", [f"view {k}" for k in range(len(views))])
    return 0


def _load_camera(path, view: int) -> Camera:
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: not JSON ({exc})") from None
    if isinstance(doc, list):
        if not 0 <= view < len(doc):
            raise ValidationError(f"--view {view} out of range for {len(doc)} cameras")
        doc = doc[view]
    return Camera.from_dict(doc)


def cmd_cameras(args) -> int:
    w, h = args.resolution
    cfg = OptConfig(n_views=args.n, radius=args.radius, elevation_deg=args.elevation,
                    resolution=(w, h), fov_deg=args.fov)
    cams = cfg.cameras(tuple(args.target))
    Path(args.out).write_text(json.dumps([c.to_dict() for c in cams], indent=2) + "\n")
    return 0


def cmd_render(args) -> int:
    scene = read_ply(args.scene) if args.scene else GaussianBatch.empty()
    cam = _load_camera(args.camera, args.view)
    img = render(scene, cam, tuple(args.background))
    if not np.isfinite(img.pixels).all():
        raise NumericError("render produced non-finite pixels")
    write_png(img.pixels, args.out)
    if args.raw:
        write_raw(img.pixels, args.raw)
    return 0


def _text_arg(value, path):
    if path:
        return _read_text(path)
    if value is None:
        raise ValidationError("text evaluation needs --hyp/--ref or --hyp-file/--ref-file")
    return value


def cmd_eval(args) -> int:
    if args.mode == "text":
        hyp = _text_arg(args.hyp, args.hyp_file)
        ref = _text_arg(args.ref, args.ref_file)
        result = metrics.text_report(hyp, ref)
    else:
        if not (args.a and args.b):
            raise ValidationError("3d evaluation needs --a and --b point clouds")
        result = metrics.pointset_report(read_points(args.a), read_points(args.b))
    doc = {"mode": args.mode, "metrics": result}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.figure:
        report.plot_metrics(result, args.figure, title=f"{args.mode} metrics")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eegsplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="band-pass and window an EEG segment")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--format", choices=["csv", "raw_f32le"], default=None,
                   help="input format (default: from extension)")
    s.add_argument("--rate", type=float, default=1000.0, help="sample rate for CSV without header")
    s.add_argument("--band", type=float, nargs=2, metavar=("LOW", "HIGH"))
    s.add_argument("--window", type=float, nargs=2, metavar=("START_MS", "END_MS"))
    s.add_argument("--out", required=True)
    s.add_argument("--out-format", choices=["csv", "raw_f32le"], default="raw_f32le")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("layout", help="predict a scene layout from text")
    s.add_argument("--text", required=True)
    s.add_argument("--endpoint")
    s.add_argument("--fallback", action="store_true", help="use the lexicon fallback if the endpoint fails")
    s.add_argument("--lexicon")
    s.add_argument("--timeout", type=float, default=10.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_layout)

    s = sub.add_parser("optimize", help="two-stage Gaussian optimisation inside a layout")
    s.add_argument("--layout", required=True)
    s.add_argument("--targets", help="ground-truth scene PLY rendered into target views")
    s.add_argument("--config")
    s.add_argument("--steps", type=int, nargs=2, metavar=("OBJECT", "SCENE"))
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("cameras", help="write a camera ring as JSON")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--radius", type=float, default=4.0)
    s.add_argument("--elevation", type=float, default=15.0)
    s.add_argument("--fov", type=float, default=45.0)
    s.add_argument("--resolution", type=int, nargs=2, default=(64, 64), metavar=("W", "H"))
    s.add_argument("--target", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cameras)

    s = sub.add_parser("render", help="render a scene PLY to PNG")
    s.add_argument("--scene", help="scene PLY (omit for an empty scene)")
    s.add_argument("--camera", required=True, help="camera JSON object or list")
    s.add_argument("--view", type=int, default=0)
    s.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    s.add_argument("--out", required=True)
    s.add_argument("--raw", help="also write a float32 dump")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="text or point-cloud metrics")
    s.add_argument("--mode", choices=["text", "3d"], required=True)
    s.add_argument("--hyp")
    s.add_argument("--ref")
    s.add_argument("--hyp-file")
    s.add_argument("--ref-file")
    s.add_argument("--a")
    s.add_argument("--b")
    s.add_argument("--out")
    s.add_argument("--figure", help="also write a bar chart PNG")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "format", "x") is None:
        args.format = "raw_f32le" if str(args.inp).endswith((".f32", ".raw", ".bin")) else "csv"
    try:
        return args.func(args)
    except EegSplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
