"""Command-line interface: train, render, eval, export, path, toy.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  ``GES_THREADS``
caps renderer tile parallelism; ``GES_DETERMINISTIC=1`` forces the
single-threaded bit-deterministic mode.  Config files are flat
``key = value`` text; command-line flags override file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cameras import Camera
from .datasets import (Dataset, DatasetError, camera_from_entry, camera_to_entry,
                       load_dataset, make_toy_scene, save_dataset, save_image)
from .forward import RenderSettings, render
from .gesfile import GesFileError, export_ges, load_ges
from .metrics import camera_path, consistency_probe, evaluate
from .optim import Schedule, TrainConfig, train
from .toyscene import occluder_spec, three_plane_spec


def _parse_config_file(path: Path) -> dict:
    """Flat key = value lines; '#' comments; values parsed as JSON when
    possible, else kept as strings."""
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


_SCHEDULE_KEYS = {"surfel_iters", "joint_iters", "discard_frac", "prune_cover_frac",
                  "w60_frac", "w90_frac", "densify_from", "densify_interval",
                  "gauss_interval"}


def build_config(file_values: dict, overrides: dict) -> TrainConfig:
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    sched_kw = {k: merged.pop(k) for k in list(merged) if k in _SCHEDULE_KEYS}
    cfg = TrainConfig(schedule=Schedule(**sched_kw))
    for key, val in merged.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config key {key!r}")
        if key == "background" and isinstance(val, list):
            val = tuple(val)
        setattr(cfg, key, val)
    return cfg


def desk_preset() -> dict:
    """Desk-scale defaults tuned for the 128px toy scenes."""
    return {"surfel_iters": 3000, "joint_iters": 1500, "densify_from": 100,
            "densify_interval": 100, "gauss_interval": 300, "sh_degree": 2,
            "lr_quat": 3e-3, "error_sample_fraction": 0.01}


def cmd_train(args) -> int:
    scene_dir = Path(args.scene)
    if not scene_dir.is_dir():
        print(f"error: scene directory {scene_dir} does not exist", file=sys.stderr)
        return 2
    values = desk_preset() if args.preset == "desk" else {}
    if args.config:
        values.update(_parse_config_file(Path(args.config)))
    overrides = {"mode": args.mode, "seed": args.seed}
    if args.rgb_surfels:
        overrides["rgb_surfels"] = True
    if args.mip:
        overrides["mip"] = True
    if args.no_surfels:
        overrides["surfels_enabled"] = False
    if args.no_gaussians:
        overrides["gaussians_enabled"] = False
    if args.epsilon is not None:
        if args.epsilon == "adaptive":
            overrides["epsilon_mode"] = "adaptive"
        else:
            overrides["epsilon_mode"] = "constant"
            overrides["epsilon_value"] = float(args.epsilon)
    cfg = build_config(values, overrides)
    dataset = load_dataset(scene_dir, test_every=args.test_every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.out_dir = str(out.parent)

    def progress(stage, it, total, loss):
        if args.verbose and it % 100 == 0:
            print(f"[{stage}] {it}/{total} loss={loss:.4f}")

    scene, trainer = train(dataset, cfg, progress)
    if args.mip and scene.gaussians.count:
        from .filters import bake_world_filter, mip_world_filter
        scene.gaussians = bake_world_filter(
            mip_world_filter(scene.gaussians, dataset.train_cameras))
    export_ges(scene, out, rgb_surfels=cfg.rgb_surfels)
    trainer.write_log(out.with_suffix(".log.csv"))
    trainer.save_checkpoint(out.with_suffix(".ckpt.npz"))
    print(f"wrote {out} ({scene.surfels.count} surfels, "
          f"{scene.gaussians.count} gaussians)")
    return 0


def _settings_from_args(args) -> RenderSettings:
    layers = {"full": "full", "surfels": "surfels_only",
              "gaussians": "gaussians_only"}[args.layer]
    return RenderSettings(supersample=args.ss, layers=layers,
                          mip=args.mip,
                          background=tuple(args.background))


def cmd_render(args) -> int:
    scene, info = load_ges(args.model)
    cam_spec = json.loads(Path(args.camera).read_text())
    if isinstance(cam_spec, list):
        cam_spec = cam_spec[args.view]
    cam = camera_from_entry(cam_spec)
    out = render(scene, cam, _settings_from_args(args))
    save_image(Path(args.out), out.image)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    scene, _ = load_ges(args.model)
    dataset = load_dataset(Path(args.scene), test_every=args.test_every)
    rep = evaluate(scene, dataset, settings=RenderSettings(supersample=args.ss))
    Path(args.out).write_text(rep.to_json())
    print(f"mean PSNR {rep.mean_psnr:.2f} dB  SSIM {rep.mean_ssim:.4f} -> {args.out}")
    return 0


def cmd_export(args) -> int:
    scene, info = load_ges(args.model)
    export_ges(scene, args.out, rgb_surfels=bool(info["rgb_surfels"]))
    print(f"wrote {args.out}")
    return 0


def cmd_path(args) -> int:
    scene, _ = load_ges(args.model)
    base_entry = json.loads(Path(args.camera).read_text())
    if isinstance(base_entry, list):
        base_entry = base_entry[0]
    base = camera_from_entry(base_entry)
    cams = camera_path(base, args.target, frames=args.frames, angle=args.angle)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = RenderSettings(supersample=args.ss)
    imgs = []
    for k, cam in enumerate(cams):
        img = render(scene, cam, settings).image
        imgs.append(img)
        save_image(out_dir / f"frame_{k:04d}.png", img)
    probe = consistency_probe(None, cams, images=imgs)
    (out_dir / "path.json").write_text(json.dumps(
        [camera_to_entry(c) for c in cams], indent=1))
    (out_dir / "probe.json").write_text(json.dumps(probe, indent=1))
    print(f"wrote {args.frames} frames to {out_dir}")
    return 0


def cmd_toy(args) -> int:
    spec = {"three-plane": three_plane_spec, "occluder": occluder_spec}[args.preset](
        resolution=args.resolution, n_cameras=args.cameras)
    if args.points:
        spec.n_points = args.points
    ds = make_toy_scene(spec, np.random.default_rng(args.seed))
    save_dataset(ds, Path(args.out))
    print(f"wrote toy dataset ({args.preset}, {args.cameras} views) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ges", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimize a model from a dataset directory")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", required=True, help="output .ges model path")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--preset", choices=["desk", "none"], default="desk")
    t.add_argument("--mode", choices=["3d", "2d"], default=None)
    t.add_argument("--rgb-surfels", action="store_true")
    t.add_argument("--mip", action="store_true")
    t.add_argument("--no-surfels", action="store_true")
    t.add_argument("--no-gaussians", action="store_true")
    t.add_argument("--epsilon", default=None,
                   help="'adaptive' or a constant value for the depth offset")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--test-every", type=int, default=8)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render a model from a camera file")
    r.add_argument("--model", required=True)
    r.add_argument("--camera", required=True, help="camera JSON (entry or list)")
    r.add_argument("--view", type=int, default=0, help="index when a list")
    r.add_argument("--out", required=True)
    r.add_argument("--layer", choices=["full", "surfels", "gaussians"], default="full")
    r.add_argument("--ss", type=int, choices=[1, 4], default=4)
    r.add_argument("--mip", action="store_true")
    r.add_argument("--background", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM report on a dataset's test split")
    e.add_argument("--model", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ss", type=int, choices=[1, 4], default=4)
    e.add_argument("--test-every", type=int, default=8)
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export", help="re-export a model file (normalizes layout)")
    x.add_argument("--model", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export)

    pa = sub.add_parser("path", help="render an orbit path and probe consistency")
    pa.add_argument("--model", required=True)
    pa.add_argument("--camera", required=True)
    pa.add_argument("--target", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    pa.add_argument("--frames", type=int, default=24)
    pa.add_argument("--angle", type=float, default=0.02, help="radians per frame")
    pa.add_argument("--ss", type=int, choices=[1, 4], default=1)
    pa.add_argument("--out", required=True)
    pa.set_defaults(fn=cmd_path)

    ty = sub.add_parser("toy", help="generate a synthetic dataset")
    ty.add_argument("--preset", choices=["three-plane", "occluder"],
                    default="three-plane")
    ty.add_argument("--resolution", type=int, default=128)
    ty.add_argument("--cameras", type=int, default=25)
    ty.add_argument("--points", type=int, default=None)
    ty.add_argument("--seed", type=int, default=0)
    ty.add_argument("--out", required=True)
    ty.set_defaults(fn=cmd_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (DatasetError, GesFileError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
