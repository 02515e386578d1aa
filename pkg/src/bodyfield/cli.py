"""Command-line entry point: scene generation, training, rendering, evaluation.

One binary, subcommand style. A sectioned key=value config file is the
source of truth for experiment parameters; unknown sections or keys are
rejected, and the effective config (defaults filled in) is echoed next to
every output for provenance. Path arguments are validated up front.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .body import PoseParams
from .fields import ABLATION_MODES, FieldConfig
from .metrics import EvalReport, evaluate, evaluate_ground_truth
from .rendering import RenderOptions, circle_rig, render_image
from .scene import (MotionSpec, SceneSpec, TextureSpec, ToyBodySpec,
                    generate_dataset, load_dataset)
from .tensorio import save_image_f32, save_image_u8
from .training import (DatasetCache, TrainingConfig, TrainState,
                       apply_ablation, held_out_loss, load_checkpoint,
                       save_checkpoint, train)

_SECTION_TYPES = {
    "scene": SceneSpec,
    "body": ToyBodySpec,
    "texture": TextureSpec,
    "motion": MotionSpec,
    "train": TrainingConfig,
}
# keys handled outside the flat scalar mapping
_SKIP_FIELDS = {"scene": {"body", "texture", "motion"},
                "texture": {"base_colors"}}


class ConfigError(ValueError):
    pass


def _coerce(raw: str, template):
    if isinstance(template, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        vals = tuple(float(v) for v in raw.replace(",", " ").split())
        if len(vals) != len(template):
            raise ConfigError(f"expected {len(template)} values, got {len(vals)}")
        return vals
    return raw


def parse_config(path: str | Path):
    """Read the sectioned config file into (SceneSpec, TrainingConfig).

    Every key must name a field of its section's dataclass; missing keys
    take the dataclass defaults.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.read(path)

    overrides: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{section}]")
        cls = _SECTION_TYPES[section]
        defaults = cls()
        skip = _SKIP_FIELDS.get(section, set())
        values = {}
        for key, raw in cp[section].items():
            if key in skip or not hasattr(defaults, key):
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _coerce(raw, getattr(defaults, key))
        overrides[section] = values

    scene = SceneSpec(
        body=ToyBodySpec(**overrides.get("body", {})),
        texture=TextureSpec(**overrides.get("texture", {})),
        motion=MotionSpec(**overrides.get("motion", {})),
        **overrides.get("scene", {}))
    training = TrainingConfig(**overrides.get("train", {}))
    scene.validate()
    training.validate()
    return scene, training


def write_effective_config(scene: SceneSpec, training: TrainingConfig,
                           path: Path) -> None:
    """Echo every effective key (defaults filled) in the config file format."""
    cp = configparser.ConfigParser()

    def fill(section, obj, skip=()):
        cp[section] = {}
        for f in dataclasses.fields(obj):
            if f.name in skip:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = " ".join(repr(float(x)) for x in v)
            cp[section][f.name] = str(v)

    fill("scene", scene, skip=("body", "texture", "motion"))
    fill("body", scene.body)
    fill("texture", scene.texture, skip=("base_colors",))
    fill("motion", scene.motion)
    fill("train", training)
    with open(path, "w") as f:
        cp.write(f)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _require(path: Path, kind: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{kind} not found: {path}")
    return path


def cmd_gen_scene(args) -> int:
    scene, training = parse_config(args.config)
    out = Path(args.out)
    ds = generate_dataset(scene, out, force=args.force)
    write_effective_config(scene, training, out / "effective_config.ini")
    print(f"dataset: {ds.num_frames} frames x {ds.num_cameras} cameras "
          f"at {scene.width}x{scene.height} -> {out}")
    print(f"splits: train cameras {ds.train_cameras}, "
          f"train frames {len(ds.train_frames)}, novel frames {len(ds.novel_frames)}")
    return 0


def _render_options(config: TrainingConfig, dataset, workers: int = 1) -> RenderOptions:
    return RenderOptions(background=tuple(dataset.background),
                         delta_n=config.delta_n,
                         samples_per_ray=config.samples_per_ray,
                         mode=config.mode, workers=workers)


def cmd_train(args) -> int:
    scene, config = parse_config(args.config)
    if args.ablation:
        config = dataclasses.replace(config, mode=args.ablation)
    if args.workers:
        config = dataclasses.replace(config, workers=args.workers)
    config.validate()
    apply_ablation(config.mode)
    dataset = load_dataset(_require(Path(args.dataset), "dataset directory"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.jsonl"

    if args.resume:
        state = load_checkpoint(_require(Path(args.resume), "checkpoint"))
        state.config = config
    else:
        if log_path.exists() and not args.force:
            raise FileExistsError(f"{log_path} exists (use --force to restart)")
        log_path.unlink(missing_ok=True)
        state = TrainState.create(dataset.model.num_joints, config)

    write_effective_config(scene, config, out / "effective_config.ini")
    cache = DatasetCache(dataset, config.delta_n)
    remaining = config.iterations - state.iteration
    if remaining <= 0:
        print(f"checkpoint already at iteration {state.iteration}; nothing to do")
        return 0

    print(f"training mode={config.mode} for {remaining} iterations "
          f"(batch {config.batch_rays} rays)")
    t0 = time.perf_counter()
    last = {"loss": float("nan")}

    def progress(rec):
        last["loss"] = rec.loss
        if rec.iteration % 50 == 0 or rec.iteration == config.iterations:
            print(f"  it {rec.iteration:6d}  loss {rec.loss:.6f}")

    train(state, cache, remaining, log_path=log_path,
          checkpoint_dir=out, on_record=progress)
    save_checkpoint(state, out / "ckpt_final.bft")
    (out / "timing.txt").write_text(
        f"iterations={state.iteration}\nseconds={time.perf_counter() - t0:.3f}\n")
    print(f"final loss {last['loss']:.6f}; checkpoint -> {out / 'ckpt_final.bft'}")
    return 0


def _load_pose_file(path: Path, num_joints: int) -> PoseParams:
    d = json.loads(path.read_text())
    pose = PoseParams(np.asarray(d["root_translation"], dtype=np.float64),
                      np.asarray(d["joint_rotations"], dtype=np.float64))
    if pose.num_joints != num_joints:
        raise ValueError(f"pose file has {pose.num_joints} joints, body has {num_joints}")
    return pose


def cmd_render(args) -> int:
    state = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    dataset = load_dataset(_require(Path(args.dataset), "dataset directory"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    existing = list(out.glob("render_*.png"))
    if existing and not args.force:
        raise FileExistsError(f"{out} already holds renders (use --force)")

    if args.pose_file:
        pose = _load_pose_file(Path(args.pose_file), dataset.model.num_joints)
    elif args.frame is not None:
        if not (0 <= args.frame < dataset.num_frames):
            raise ValueError(f"frame {args.frame} outside dataset (T={dataset.num_frames})")
        pose = dataset.poses[args.frame]
    else:
        raise ValueError("choose a pose source: --frame or --pose-file")

    if args.orbit:
        spec = dataset.spec
        cams = circle_rig(args.orbit, spec.rig_radius, spec.rig_height,
                          np.array([0.0, 0.0, spec.rig_target_z]), spec.fov_deg,
                          spec.width, spec.height)
    else:
        k = args.camera if args.camera is not None else 0
        if not (0 <= k < dataset.num_cameras):
            raise ValueError(f"camera {k} outside dataset (K={dataset.num_cameras})")
        cams = [dataset.cameras[k]]

    opts = _render_options(state.config, dataset, workers=args.workers or 1)
    for i, cam in enumerate(cams):
        img = render_image(dataset.model, state.nets, pose, dataset.shape, cam, opts)
        save_image_u8(out / f"render_{i:04d}.png", img)
        save_image_f32(out / f"render_{i:04d}.npy", img)
    print(f"wrote {len(cams)} view(s) -> {out}")
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(_require(Path(args.dataset), "dataset directory"))
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists (use --force)")
    if args.sanity_gt:
        report = evaluate_ground_truth(dataset, args.split)
    else:
        if not args.checkpoint:
            raise ValueError("--checkpoint is required unless --sanity-gt is given")
        state = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
        report = evaluate(state.nets, dataset, args.split,
                          _render_options(state.config, dataset))
    report.save(out)
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    scene, config = parse_config(args.config)
    dataset = load_dataset(_require(Path(args.dataset), "dataset directory"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "ablation.txt"
    if table_path.exists() and not args.force:
        raise FileExistsError(f"{table_path} exists (use --force)")
    write_effective_config(scene, config, out / "effective_config.ini")

    rows = []
    for mode in ABLATION_MODES:
        mode_cfg = dataclasses.replace(config, mode=mode)
        state = TrainState.create(dataset.model.num_joints, mode_cfg)
        cache = DatasetCache(dataset, mode_cfg.delta_n)
        print(f"[{mode}] training {mode_cfg.iterations} iterations")
        train(state, cache, mode_cfg.iterations,
              log_path=out / f"log_{mode}.jsonl")
        save_checkpoint(state, out / f"ckpt_{mode}.bft")
        for split in ("novel_view", "novel_pose"):
            rep = evaluate(state.nets, dataset, split,
                           _render_options(mode_cfg, dataset))
            rep.save(out / f"eval_{mode}_{split}.json")
            rows.append((mode, split, rep.mean_psnr, rep.mean_ssim))
            print(f"[{mode}] {split}: psnr {rep.mean_psnr:.2f} dB, "
                  f"ssim {rep.mean_ssim:.4f}")

    lines = [f"{'mode':>14} {'split':>11} {'psnr_db':>9} {'ssim':>7}"]
    for mode, split, p, s in rows:
        lines.append(f"{mode:>14} {split:>11} {p:>9.3f} {s:>7.4f}")
    table = "\n".join(lines)
    table_path.write_text(table + "\n")
    print(table)
    return 0


def cmd_inspect_projection(args) -> int:
    from .projection import build_bvh, project_points
    from .rendering import dilated_bounds, generate_rays, ray_bounds, sample_rays

    dataset = load_dataset(_require(Path(args.dataset), "dataset directory"))
    t = args.frame
    if not (0 <= t < dataset.num_frames):
        raise ValueError(f"frame {t} outside dataset")
    from .body import pose_body
    mesh = pose_body(dataset.model, dataset.poses[t], dataset.shape)
    bvh = build_bvh(mesh)

    if args.ray:
        vals = [float(v) for v in args.ray.replace(",", " ").split()]
        if len(vals) != 6:
            raise ValueError("--ray expects 'ox oy oz dx dy dz'")
        origin = np.array(vals[:3])
        direction = np.array(vals[3:])
        direction = direction / np.linalg.norm(direction)
    else:
        cam = dataset.cameras[args.camera or 0]
        px = [float(v) for v in (args.pixel or "0 0").replace(",", " ").split()]
        origins, dirs = generate_rays(cam, np.array([px]))
        origin, direction = origins[0], dirs[0]

    box_min, box_max = dilated_bounds(mesh, args.delta_n)
    near, far, hit = ray_bounds(origin, direction, box_min, box_max)
    if not hit[0]:
        print("ray misses the dilated body bounds")
        return 0
    ts = near[0] + (far[0] - near[0]) * (np.arange(args.count) + 0.5) / args.count
    pts = origin[None, :] + ts[:, None] * direction[None, :]
    faces, bary, dist = project_points(bvh, pts)
    from .projection import interpolate_uv
    uv = interpolate_uv(mesh, faces, bary)
    print(f"ray origin {origin} direction {direction} near {near[0]:.4f} far {far[0]:.4f}")
    print(f"{'t':>9} {'u':>8} {'v':>8} {'l':>9} {'face':>6} accepted")
    for i in range(args.count):
        acc = "yes" if dist[i] < args.delta_n else "no"
        print(f"{ts[i]:>9.4f} {uv[i, 0]:>8.4f} {uv[i, 1]:>8.4f} "
              f"{dist[i]:>9.5f} {faces[i]:>6d} {acc}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bodyfield",
        description="surface-anchored radiance fields on synthetic bodies")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render a synthetic multi-view dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_scene)

    t = sub.add_parser("train", help="optimize the field networks")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--ablation", choices=ABLATION_MODES)
    t.add_argument("--workers", type=int)
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render novel views or poses from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--frame", type=int)
    r.add_argument("--pose-file")
    r.add_argument("--camera", type=int)
    r.add_argument("--orbit", type=int, help="render an N-camera orbit instead")
    r.add_argument("--workers", type=int)
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="score a checkpoint on an evaluation split")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", required=True, choices=("novel_view", "novel_pose"))
    e.add_argument("--out", required=True)
    e.add_argument("--sanity-gt", action="store_true",
                   help="score the ground truth against itself")
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate all ablation modes")
    a.add_argument("--config", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(fn=cmd_ablate)

    i = sub.add_parser("inspect-projection",
                       help="dump field coordinates along one ray")
    i.add_argument("--dataset", required=True)
    i.add_argument("--frame", type=int, default=0)
    i.add_argument("--ray", help="'ox oy oz dx dy dz'")
    i.add_argument("--camera", type=int)
    i.add_argument("--pixel", help="'px py'")
    i.add_argument("--count", type=int, default=64)
    i.add_argument("--delta-n", type=float, default=0.10)
    i.set_defaults(fn=cmd_inspect_projection)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
