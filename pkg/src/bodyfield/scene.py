"""Synthetic multi-view ground truth: a classically ray-traced toy body.

The texture is procedural and pose-dependent: each atlas chart carries a base
color, stripes and a checker, plus a wrinkle term whose amplitude scales with
the bend angle of the joint driving that chart. That gives the learned field
a real pose-to-appearance mapping to recover, not just geometry.

Datasets are written as a manifest (spec echo, splits, per-frame poses), a
body file, a camera file, and one 8-bit PNG per (frame, camera). Generation
is deterministic: the same spec reproduces the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .body import (CHEST, HIP_L, HIP_R, NECK, SHOULDER_L, SHOULDER_R,
                   PoseParams, ShapeParams, SkinnedBodyModel, ToyBodySpec,
                   generate_toy_body, load_body, pose_body, save_body)
from .projection import build_bvh, cast_rays, interpolate_uv
from .rendering import Camera, circle_rig, generate_rays, load_cameras, save_cameras

AMBIENT = 0.25


@dataclass(frozen=True)
class TextureSpec:
    stripe_freq: float = 6.0
    stripe_amp: float = 0.12
    checker_freq: float = 4.0
    checker_amp: float = 0.08
    wrinkle_freq: float = 9.0
    wrinkle_gain: float = 0.40
    # base albedo per atlas chart (torso, head, arm_l, arm_r, leg_l, leg_r)
    base_colors: tuple = (
        (0.30, 0.45, 0.62), (0.65, 0.52, 0.40), (0.58, 0.32, 0.35),
        (0.35, 0.55, 0.32), (0.45, 0.38, 0.58), (0.55, 0.50, 0.30))


@dataclass(frozen=True)
class MotionSpec:
    arm_amplitude: float = 0.55      # radians, training swing
    leg_amplitude: float = 0.40
    twist_amplitude: float = 0.15
    nod_amplitude: float = 0.10
    cycles: float = 1.5              # swing cycles over the training frames
    novel_margin: float = 0.25       # min max-norm distance of novel poses


@dataclass(frozen=True)
class SceneSpec:
    body: ToyBodySpec = ToyBodySpec()
    texture: TextureSpec = TextureSpec()
    motion: MotionSpec = MotionSpec()
    num_cameras: int = 8
    num_train_cameras: int = 4
    rig_radius: float = 2.2
    rig_height: float = 0.9
    rig_target_z: float = 0.72
    fov_deg: float = 44.0
    num_frames: int = 30
    train_frame_fraction: float = 0.8
    width: int = 128
    height: int = 128
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def validate(self) -> None:
        if self.num_cameras < 1 or self.num_frames < 1:
            raise ValueError("need at least one camera and one frame")
        if not (0 < self.num_train_cameras <= self.num_cameras):
            raise ValueError("train camera count out of range")
        if self.width < 2 or self.height < 2:
            raise ValueError("resolution too small")

    @property
    def num_train_frames(self) -> int:
        return max(1, int(round(self.train_frame_fraction * self.num_frames)))

    def rig(self) -> list[Camera]:
        target = np.array([0.0, 0.0, self.rig_target_z])
        return circle_rig(self.num_cameras, self.rig_radius, self.rig_height,
                          target, self.fov_deg, self.width, self.height)

    def train_camera_ids(self) -> list[int]:
        step = self.num_cameras / self.num_train_cameras
        return sorted({int(np.floor(i * step)) for i in range(self.num_train_cameras)})


# ---------------------------------------------------------------------------
# Motion script
# ---------------------------------------------------------------------------


def script_pose(spec: SceneSpec, t: int) -> PoseParams:
    """Deterministic pose for frame t.

    Training frames swing the limbs sinusoidally within the training
    amplitudes. Novel frames push the left-shoulder angle beyond the training
    amplitude by at least the margin, so every novel pose differs from every
    training pose by >= novel_margin in joint-angle max-norm.
    """
    m = spec.motion
    n_train = spec.num_train_frames
    rot = np.zeros((7, 3))
    if t < n_train:
        phase = 2.0 * np.pi * m.cycles * t / max(n_train, 1)
        s = np.sin(phase)
        rot[SHOULDER_L, 0] = m.arm_amplitude * s
        rot[SHOULDER_R, 0] = -m.arm_amplitude * s
        rot[HIP_L, 0] = -m.leg_amplitude * s
        rot[HIP_R, 0] = m.leg_amplitude * s
        rot[CHEST, 2] = m.twist_amplitude * np.sin(0.5 * phase + 0.3)
        rot[NECK, 0] = m.nod_amplitude * np.sin(0.7 * phase + 1.1)
    else:
        n_novel = max(spec.num_frames - n_train, 1)
        u = (t - n_train + 1) / n_novel
        wob = 2.0 * np.pi * 0.9 * u
        rot[SHOULDER_L, 0] = m.arm_amplitude + m.novel_margin + \
            0.15 * (1.0 + np.sin(wob)) / 2.0
        rot[SHOULDER_R, 0] = -(m.arm_amplitude + 0.5 * m.novel_margin * u)
        rot[HIP_L, 0] = -(m.leg_amplitude + 0.5 * m.novel_margin * u)
        rot[HIP_R, 0] = m.leg_amplitude + 0.5 * m.novel_margin * u
        rot[CHEST, 2] = m.twist_amplitude * np.cos(wob)
        rot[NECK, 0] = m.nod_amplitude * np.sin(wob)
    return PoseParams(np.zeros(3), rot)


# ---------------------------------------------------------------------------
# Procedural texture
# ---------------------------------------------------------------------------


def chart_bend_angles(model: SkinnedBodyModel, pose: PoseParams) -> np.ndarray:
    """Bend angle (axis-angle norm) of the joint adjacent to each chart."""
    joints = model.charts[:, 4].astype(int)
    return np.linalg.norm(pose.joint_rotations[joints], axis=1)


def procedural_texture(uv: np.ndarray, chart_ids: np.ndarray, pose: PoseParams,
                       spec: TextureSpec, model: SkinnedBodyModel) -> np.ndarray:
    """Albedo at atlas coordinates (N, 2) on the given charts. Returns (N, 3).

    Deterministic; the wrinkle term vanishes at zero bend and its amplitude
    grows linearly with the adjacent joint's bend angle.
    """
    uv = np.atleast_2d(uv)
    chart_ids = np.atleast_1d(chart_ids)
    rects = model.charts[chart_ids, :4]
    lu = (uv[:, 0] - rects[:, 0]) / (rects[:, 2] - rects[:, 0])
    lv = (uv[:, 1] - rects[:, 1]) / (rects[:, 3] - rects[:, 1])

    base = np.asarray(spec.base_colors, dtype=np.float64)[chart_ids]
    stripe = spec.stripe_amp * np.sin(2.0 * np.pi * spec.stripe_freq * lv)
    checker = spec.checker_amp * (
        ((np.floor(lu * spec.checker_freq) + np.floor(lv * spec.checker_freq)) % 2.0) * 2.0 - 1.0)
    bend = chart_bend_angles(model, pose)[chart_ids]
    wrinkle = spec.wrinkle_gain * bend * np.sin(
        2.0 * np.pi * spec.wrinkle_freq * (lu + lv))
    return np.clip(base + (stripe + checker + wrinkle)[:, None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# Ground-truth ray tracer
# ---------------------------------------------------------------------------


def raytrace_frame(spec: SceneSpec, pose: PoseParams, camera: Camera,
                   model: SkinnedBodyModel | None = None) -> np.ndarray:
    """Classical render of the posed, textured body: one bounce, headlight shading."""
    if model is None:
        model = generate_toy_body(spec.body)
    posed = pose_body(model, pose)
    bvh = build_bvh(posed)

    w, h = camera.width, camera.height
    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    origins, dirs = generate_rays(camera, np.stack([xs.ravel(), ys.ravel()], axis=1))
    faces, _, bary = cast_rays(bvh, origins, dirs)

    img = np.empty((h * w, 3))
    img[...] = np.asarray(spec.background, dtype=np.float64)
    hit = faces >= 0
    if hit.any():
        fidx = faces[hit]
        uv = interpolate_uv(posed, fidx, bary[hit])
        albedo = procedural_texture(uv, model.face_part[fidx], pose,
                                    spec.texture, model)
        tri = posed.vertices[posed.faces[fidx]]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        cos = np.abs(np.einsum("nd,nd->n", n, dirs[hit]))
        img[hit] = albedo * (AMBIENT + (1.0 - AMBIENT) * cos)[:, None]
    return np.clip(img.reshape(h, w, 3), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Dataset container and persistence
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1


@dataclass
class FrameDataset:
    """In-memory view of a generated dataset plus its split tags."""

    spec: SceneSpec
    model: SkinnedBodyModel
    cameras: list[Camera]
    poses: list[PoseParams]
    shape: ShapeParams
    images: np.ndarray                 # (T, K, H, W, 3) float32 in [0, 1]
    train_cameras: list[int]
    test_cameras: list[int]
    train_frames: list[int]
    novel_frames: list[int]
    background: np.ndarray
    root: Path | None = None

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    @property
    def num_cameras(self) -> int:
        return len(self.cameras)

    def validate(self) -> None:
        t, k = self.num_frames, self.num_cameras
        h, w = self.spec.height, self.spec.width
        if self.images.shape != (t, k, h, w, 3):
            raise ValueError("dataset images incomplete or resolution mismatch")

    def split_pairs(self, split: str) -> list[tuple[int, int]]:
        """(frame, camera) pairs of an evaluation split."""
        if split == "novel_view":
            return [(t, k) for t in self.train_frames for k in self.test_cameras]
        if split == "novel_pose":
            return [(t, k) for t in self.novel_frames for k in range(self.num_cameras)]
        raise ValueError(f"unknown split {split!r} (novel_view | novel_pose)")


def frame_name(t: int, k: int) -> str:
    return f"t{t:03d}_c{k:02d}.png"


def generate_dataset(spec: SceneSpec, out_dir: str | Path,
                     force: bool = False) -> FrameDataset:
    """Render all T x K ground-truth views and persist the dataset directory."""
    spec.validate()
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists (use force to overwrite)")
    (out / "frames").mkdir(parents=True, exist_ok=True)

    model = generate_toy_body(spec.body)
    cameras = spec.rig()
    poses = [script_pose(spec, t) for t in range(spec.num_frames)]
    train_cams = spec.train_camera_ids()
    test_cams = [k for k in range(spec.num_cameras) if k not in train_cams]
    n_train = spec.num_train_frames
    train_frames = list(range(n_train))
    novel_frames = list(range(n_train, spec.num_frames))

    images = np.zeros((spec.num_frames, spec.num_cameras,
                       spec.height, spec.width, 3), dtype=np.float32)
    for t, pose in enumerate(poses):
        for k, cam in enumerate(cameras):
            img = raytrace_frame(spec, pose, cam, model)
            tensorio.save_image_u8(out / "frames" / frame_name(t, k), img)
            # training supervises against the quantized file contents
            images[t, k] = tensorio.to_u8(img).astype(np.float32) / 255.0

    save_body(model, out / "body.txt")
    save_cameras(cameras, out / "cameras.txt")
    manifest = {
        "format_version": MANIFEST_VERSION,
        "scene": asdict(spec),
        "splits": {"train_cameras": train_cams, "test_cameras": test_cams,
                   "train_frames": train_frames, "novel_frames": novel_frames},
        "poses": [{"root_translation": list(map(float, p.root_translation)),
                   "joint_rotations": [list(map(float, r)) for r in p.joint_rotations]}
                  for p in poses],
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1))

    ds = FrameDataset(spec=spec, model=model, cameras=cameras, poses=poses,
                      shape=ShapeParams.neutral(), images=images,
                      train_cameras=train_cams, test_cameras=test_cams,
                      train_frames=train_frames, novel_frames=novel_frames,
                      background=np.asarray(spec.background), root=out)
    ds.validate()
    return ds


def _spec_from_dict(d: dict) -> SceneSpec:
    d = dict(d)
    d["body"] = ToyBodySpec(**d["body"])
    d["texture"] = TextureSpec(
        **{**d["texture"],
           "base_colors": tuple(tuple(c) for c in d["texture"]["base_colors"])})
    d["motion"] = MotionSpec(**d["motion"])
    d["background"] = tuple(d["background"])
    return SceneSpec(**d)


def load_dataset(path: str | Path) -> FrameDataset:
    """Read a dataset directory back into memory, validating completeness."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('format_version')!r}")
    spec = _spec_from_dict(manifest["scene"])
    model = load_body(root / "body.txt")
    cameras = load_cameras(root / "cameras.txt")
    poses = [PoseParams(np.array(p["root_translation"]),
                        np.array(p["joint_rotations"]))
             for p in manifest["poses"]]
    splits = manifest["splits"]

    images = np.zeros((spec.num_frames, spec.num_cameras,
                       spec.height, spec.width, 3), dtype=np.float32)
    for t in range(spec.num_frames):
        for k in range(spec.num_cameras):
            f = root / "frames" / frame_name(t, k)
            if not f.exists():
                raise FileNotFoundError(f"dataset frame missing: {f}")
            images[t, k] = tensorio.load_image_u8(f)

    ds = FrameDataset(spec=spec, model=model, cameras=cameras, poses=poses,
                      shape=ShapeParams.neutral(), images=images,
                      train_cameras=list(splits["train_cameras"]),
                      test_cameras=list(splits["test_cameras"]),
                      train_frames=list(splits["train_frames"]),
                      novel_frames=list(splits["novel_frames"]),
                      background=np.asarray(spec.background), root=root)
    ds.validate()
    return ds
