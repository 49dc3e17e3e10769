"""Command-line driver.

Subcommands: reconstruct, generate, render, animate, reshape, composite.
Exit codes: 0 success, 1 runtime failure, 2 usage error. A JSON config file
(--config) supplies defaults; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .articulation import ArticulatedField
from .body import BodyConfiguration, RiggedBodyModel, load_pose_sequence
from .field import ImplicitAvatarField
from .guidance import MockGuidance, RemoteGuidance
from .mocks import textured_rig_targets
from .renderer import (AnalyticSphereScene, EmptyScene, composite_render,
                       render_image, save_float_map, save_png)
from .rigs import face_colors
from .training import (DESK_FIELD_KWARGS, DiagnosticsLog, LossWeights,
                       CameraSampler, SceneBoxes, StageSchedule,
                       TrainingSchedule, reconstruct_template,
                       run_generation)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    pass


def _require_file(path, what):
    if path is None:
        raise UsageError(f"missing required {what} path")
    if not Path(path).exists():
        raise UsageError(f"{what} file not found: {path}")
    return path


def _load_config(path):
    if path is None:
        return {}
    _require_file(path, "config")
    return json.loads(Path(path).read_text())


def _cfg(args, config, key, default):
    val = getattr(args, key, None)
    if val is not None:
        return val
    return config.get(key, default)


def _eval_camera(field_or_model, azimuth, elevation, distance, resolution,
                 center=(0.0, 0.0, 0.0), radius=0.9):
    sampler = CameraSampler(np.asarray(center) - radius,
                            np.asarray(center) + radius, resolution)
    return sampler.camera(elevation, azimuth, distance)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_reconstruct(args):
    config = _load_config(args.config)
    rig = _require_file(args.rig, "rig")
    model = RiggedBodyModel.load(rig)
    steps = int(_cfg(args, config, "steps", 5000))
    res = int(_cfg(args, config, "res", 96))
    views = int(_cfg(args, config, "views", 50))
    seed = int(_cfg(args, config, "seed", 0))
    log = DiagnosticsLog(args.log) if args.log else None
    field, held_out = reconstruct_template(
        model, views=views, resolution=res, steps=steps, seed=seed, log=log)
    field.save(args.out)
    print(f"reconstructed template: {steps} steps at {res}x{res}, "
          f"held-out PSNR {held_out:.2f} dB -> {args.out}")
    if log:
        log.close()
    return 0


def _build_schedule(args, config):
    if getattr(args, "desk", False) or config.get("desk", False):
        sched = TrainingSchedule.desk_default()
    else:
        sched = TrainingSchedule.full_default()
    coarse_epochs = _cfg(args, config, "coarse_epochs", None)
    fine_epochs = _cfg(args, config, "fine_epochs", None)
    if coarse_epochs is not None:
        sched.coarse.epochs = int(coarse_epochs)
    if fine_epochs is not None:
        sched.fine.epochs = int(fine_epochs)
    for stage in (sched.coarse, sched.fine):
        stage.body_captures = int(config.get(f"{stage.name}_body_captures",
                                             stage.body_captures))
        stage.head_captures = int(config.get(f"{stage.name}_head_captures",
                                             stage.head_captures))
    return sched


def cmd_generate(args):
    config = _load_config(args.config)
    rig = _require_file(args.rig, "rig")
    ckpt = _require_file(args.template, "template checkpoint")
    model = RiggedBodyModel.load(rig)
    template = ImplicitAvatarField.load(ckpt)
    schedule = _build_schedule(args, config)
    seed = int(_cfg(args, config, "seed", 0))
    weights = LossWeights(
        lambda_sil=float(_cfg(args, config, "lambda_sil", 1.0)),
        lambda_eik=float(_cfg(args, config, "lambda_eik", 0.1)))

    print(f"generation schedule: coarse {schedule.coarse.resolution}x"
          f"{schedule.coarse.resolution} for {schedule.coarse.epochs} epochs "
          f"({schedule.coarse.body_captures} body + "
          f"{schedule.coarse.head_captures} head captures/epoch), "
          f"fine {schedule.fine.resolution}x{schedule.fine.resolution} for "
          f"{schedule.fine.epochs} epochs "
          f"({schedule.fine.body_captures} body + "
          f"{schedule.fine.head_captures} head captures/epoch), "
          f"lr {schedule.learning_rate}")

    if args.oracle == "mock":
        oracle = MockGuidance(
            textured_rig_targets(model, face_colors(model, seed=seed)),
            lam=float(_cfg(args, config, "lambda_mock", 1.0)))
    else:
        if not args.endpoint:
            raise UsageError("--oracle remote requires --endpoint")
        oracle = RemoteGuidance(args.endpoint)

    log = DiagnosticsLog(args.log) if args.log else None
    out_dir = Path(args.out).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    field = run_generation(template, oracle, args.prompt or "", model,
                           schedule=schedule, weights=weights, seed=seed,
                           checkpoint_dir=out_dir, log=log)
    field.save(args.out)
    print(f"generated avatar checkpoint -> {args.out}")
    if log:
        log.close()
    return 0


def cmd_render(args):
    config = _load_config(args.config)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    field = ImplicitAvatarField.load(ckpt)
    res = int(_cfg(args, config, "res", 128))
    cam = _eval_camera(field, float(_cfg(args, config, "azimuth", 0.0)),
                       float(_cfg(args, config, "elevation", 0.0)),
                       float(_cfg(args, config, "distance", 2.1)), res)
    out = render_image(field, cam, background=args.background,
                       n_samples=int(_cfg(args, config, "samples", 96)),
                       seed=int(_cfg(args, config, "seed", 0)))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_png(out_dir / "rgb.png", out.rgb)
    save_float_map(out_dir / "opacity.f32", out.opacity)
    if args.depth:
        save_float_map(out_dir / "depth.f32", out.depth)
        save_png(out_dir / "depth.png",
                 1.0 - (out.depth - out.depth.min())
                 / max(float(np.ptp(out.depth)), 1e-9))
    print(f"rendered {res}x{res} -> {out_dir}")
    return 0


def _articulated_frames(field, model, configs, args, config):
    res = int(_cfg(args, config, "res", 128))
    seed = int(_cfg(args, config, "seed", 0))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, target in enumerate(configs):
        art = ArticulatedField(model, target)
        center = art.deformed.mean(axis=0)
        cam = _eval_camera(field, float(_cfg(args, config, "azimuth", 0.0)),
                           float(_cfg(args, config, "elevation", 0.0)),
                           float(_cfg(args, config, "distance", 2.1)), res,
                           center=center)
        out = art.render(field, cam, background=args.background,
                         n_samples=int(_cfg(args, config, "samples", 64)),
                         seed=seed)
        save_png(out_dir / f"frame_{i:04d}.png", out.rgb)
    print(f"wrote {len(configs)} frames -> {out_dir}")
    return 0


def cmd_animate(args):
    config = _load_config(args.config)
    field = ImplicitAvatarField.load(_require_file(args.checkpoint, "checkpoint"))
    model = RiggedBodyModel.load(_require_file(args.rig, "rig"))
    frames = load_pose_sequence(_require_file(args.poses, "pose sequence"))
    return _articulated_frames(field, model, frames, args, config)


def cmd_reshape(args):
    config = _load_config(args.config)
    field = ImplicitAvatarField.load(_require_file(args.checkpoint, "checkpoint"))
    model = RiggedBodyModel.load(_require_file(args.rig, "rig"))
    beta_a = np.asarray(json.loads(args.beta_a), np.float64)
    beta_b = np.asarray(json.loads(args.beta_b), np.float64)
    n = int(_cfg(args, config, "frames", 5))
    configs = []
    for lam in np.linspace(0.0, 1.0, n):
        beta = (1 - lam) * beta_a + lam * beta_b
        configs.append(BodyConfiguration(
            pose=np.zeros((model.num_joints, 3)), shape=beta))
    return _articulated_frames(field, model, configs, args, config)


def cmd_composite(args):
    config = _load_config(args.config)
    field = ImplicitAvatarField.load(_require_file(args.checkpoint, "checkpoint"))
    scene_spec = json.loads(Path(_require_file(args.scene, "scene")).read_text())
    spheres = scene_spec.get("spheres", [])
    scene = AnalyticSphereScene(spheres) if spheres else EmptyScene()
    res = int(_cfg(args, config, "res", 128))
    cam = _eval_camera(field, float(_cfg(args, config, "azimuth", 0.0)),
                       float(_cfg(args, config, "elevation", 0.0)),
                       float(_cfg(args, config, "distance", 2.1)), res)
    alignment = np.asarray(scene_spec.get("alignment", np.eye(4).tolist()))
    out = composite_render(field, scene, cam, alignment=alignment,
                           background=args.background,
                           n_samples=int(_cfg(args, config, "samples", 96)),
                           seed=int(_cfg(args, config, "seed", 0)))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_png(out_dir / "composite.png", out.rgb)
    save_float_map(out_dir / "depth.f32", out.depth)
    print(f"composite render -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avatarforge",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--res", type=int)
        sp.add_argument("--log", help="diagnostics NDJSON output path")
        sp.add_argument("--background", default="white",
                        choices=("white", "black", "noise"))

    sp = sub.add_parser("reconstruct", help="fit the template field to a rig")
    common(sp)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--views", type=int)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("generate", help="guided avatar generation")
    common(sp)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--template", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--prompt", default="")
    sp.add_argument("--oracle", choices=("mock", "remote"), default="mock")
    sp.add_argument("--endpoint")
    sp.add_argument("--desk", action="store_true",
                    help="use the CPU-scale schedule")
    sp.add_argument("--coarse-epochs", type=int, dest="coarse_epochs")
    sp.add_argument("--fine-epochs", type=int, dest="fine_epochs")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("render", help="render a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--azimuth", type=float)
    sp.add_argument("--elevation", type=float)
    sp.add_argument("--distance", type=float)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--depth", action="store_true")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("animate", help="render a pose sequence")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--azimuth", type=float)
    sp.add_argument("--elevation", type=float)
    sp.add_argument("--distance", type=float)
    sp.add_argument("--samples", type=int)
    sp.set_defaults(func=cmd_animate)

    sp = sub.add_parser("reshape", help="shape-interpolation frames")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--beta-a", required=True, dest="beta_a",
                    help="JSON list, e.g. '[0,0]'")
    sp.add_argument("--beta-b", required=True, dest="beta_b")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--azimuth", type=float)
    sp.add_argument("--elevation", type=float)
    sp.add_argument("--distance", type=float)
    sp.add_argument("--samples", type=int)
    sp.set_defaults(func=cmd_reshape)

    sp = sub.add_parser("composite", help="depth-test composite with a scene")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--azimuth", type=float)
    sp.add_argument("--elevation", type=float)
    sp.add_argument("--distance", type=float)
    sp.add_argument("--samples", type=int)
    sp.set_defaults(func=cmd_composite)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
