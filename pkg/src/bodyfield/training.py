"""Optimization of the field networks against a synthetic dataset.

Each step draws a random (frame, camera, pixel) ray batch from the train
split, renders it through the sampling/field/compositing pipeline under the
configured ablation wiring, and takes one Adam step on the mean squared
photometric error. Work is split into fixed-size ray chunks whose gradients
are merged in chunk order, so results are bitwise identical for any worker
count. The RNG state travels with checkpoints, making an interrupted and
resumed run indistinguishable from an uninterrupted one.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .body import PoseParams
from .fields import (ABLATION_MODES, AdamHyper, AdamState, FieldConfig,
                     FieldNets, GradientStore, adam_step)
from .projection import build_bvh
from .rendering import (RenderOptions, composite_backward, composite_rays,
                        dilated_bounds, generate_rays, ray_bounds, sample_rays)
from .scene import FrameDataset

TRAIN_CHUNK = 256    # rays per gradient chunk; fixed so worker count cannot
                     # change the reduction order


@dataclass
class TrainingConfig:
    learning_rate: float = 5e-4
    lr_final: float = 5e-5
    batch_rays: int = 1024
    iterations: int = 30000
    delta_n: float = 0.10
    samples_per_ray: int = 64
    seed: int = 0
    mode: str = "full"
    checkpoint_every: int = 5000
    psnr_every: int = 0
    dtype: str = "float32"
    workers: int = 1

    def validate(self) -> None:
        if min(self.learning_rate, self.lr_final) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.batch_rays, self.iterations, self.samples_per_ray) <= 0:
            raise ValueError("counts must be positive")
        if self.delta_n <= 0:
            raise ValueError("acceptance threshold must be positive")
        if self.mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}")

    def lr_at(self, iteration: int) -> float:
        t = min(iteration / max(self.iterations, 1), 1.0)
        return self.learning_rate * (self.lr_final / self.learning_rate) ** t


@dataclass
class LossRecord:
    iteration: int
    loss: float
    wall_clock: float
    train_psnr: float | None = None

    def log_line(self) -> str:
        # wall clock is intentionally excluded: log files must be
        # reproducible byte for byte under identical seeds
        rec = {"iteration": self.iteration, "loss": self.loss}
        if self.train_psnr is not None:
            rec["train_psnr"] = self.train_psnr
        return json.dumps(rec, sort_keys=True)


@dataclass(frozen=True)
class PipelineWiring:
    """Which pipeline stages an ablation mode keeps active."""

    mode: str
    project_to_surface: bool
    run_deform: bool
    pose_condition: bool
    surface_only: bool


def apply_ablation(mode: str) -> PipelineWiring:
    """The four published ablations plus the identity wiring."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    return PipelineWiring(
        mode=mode,
        project_to_surface=mode != "no_projection",
        run_deform=mode != "no_deform",
        pose_condition=mode != "no_pose",
        surface_only=mode == "naked_surface",
    )


def photometric_loss(rendered: np.ndarray, truth: np.ndarray):
    """Mean over the batch of the squared RGB error; returns (loss, grad)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if rendered.shape != truth.shape:
        raise ValueError("rendered/ground-truth batch shapes differ")
    diff = rendered - truth
    n = max(len(rendered), 1)
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n


# ---------------------------------------------------------------------------
# Cached per-dataset geometry
# ---------------------------------------------------------------------------


class DatasetCache:
    """Per-frame posed meshes and BVHs plus per-camera ray grids.

    Poses are known up front, so everything here is computed once per
    dataset and shared read-only across steps and workers.
    """

    def __init__(self, dataset: FrameDataset, delta_n: float):
        self.dataset = dataset
        self.delta_n = delta_n
        from .body import pose_body
        self.meshes = [pose_body(dataset.model, p, dataset.shape)
                       for p in dataset.poses]
        self.bvhs = [build_bvh(m) for m in self.meshes]
        bounds = [dilated_bounds(m, delta_n) for m in self.meshes]
        self.box_min = np.array([b[0] for b in bounds])
        self.box_max = np.array([b[1] for b in bounds])
        self.pose_vecs = np.array([p.flat_nonroot() for p in dataset.poses])

        h, w = dataset.spec.height, dataset.spec.width
        self.cam_centers = np.array([c.center for c in dataset.cameras])
        grids = []
        for cam in dataset.cameras:
            xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
            _, dirs = generate_rays(cam, np.stack([xs.ravel(), ys.ravel()], axis=1))
            grids.append(dirs.reshape(h, w, 3))
        self.cam_dirs = np.array(grids)


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------


class TrainState:
    """Networks, optimizer moments, RNG, and the iteration counter."""

    def __init__(self, nets: FieldNets, config: TrainingConfig,
                 adam: AdamState | None = None,
                 rng: np.random.Generator | None = None, iteration: int = 0):
        self.nets = nets
        self.config = config
        self.adam = adam if adam is not None else AdamState(nets.params())
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.iteration = iteration
        self.hyper = AdamHyper(learning_rate=config.learning_rate)

    @staticmethod
    def create(num_joints: int, config: TrainingConfig,
               field_config: FieldConfig | None = None) -> "TrainState":
        config.validate()
        fc = field_config or FieldConfig(dtype=config.dtype)
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        nets = FieldNets(num_joints, fc,
                         seed=int(seeds[0].generate_state(1)[0]))
        rng = np.random.default_rng(seeds[1])
        return TrainState(nets, config, rng=rng)


def _render_ray_chunk(nets: FieldNets, cache: DatasetCache, mode: str,
                      frames, cams, px, py, jitter,
                      samples_per_ray: int, delta_n: float,
                      want_grads: bool, batch_size: int, gt=None):
    """Render (and optionally backprop) one ray chunk, frame-grouped.

    Rays are reordered by (frame, draw order); returns that order so the
    caller can align ground truth. Gradient normalization uses the full
    batch size.
    """
    order = np.argsort(frames, kind="stable")
    bg = cache.dataset.background.astype(np.float64)
    dirs = cache.cam_dirs[cams, py, px]
    origins = cache.cam_centers[cams]

    piece_offsets = [np.zeros(1, dtype=np.int64)]
    pieces = {"coords": [], "positions": [], "deltas": [], "dirs": [], "fidx": []}
    unique_frames = []
    ray_order = []
    for f in np.unique(frames[order]):
        rows = order[frames[order] == f]
        ray_order.append(rows)
        near, far, hit = ray_bounds(origins[rows], dirs[rows],
                                    cache.box_min[f], cache.box_max[f])
        sub = np.flatnonzero(hit)
        offsets = np.zeros(len(rows) + 1, dtype=np.int64)
        if len(sub):
            batch = sample_rays(origins[rows][sub], dirs[rows][sub],
                                near[sub], far[sub], cache.bvhs[f],
                                cache.meshes[f], samples_per_ray, delta_n,
                                jitter[rows][sub])
            counts = np.zeros(len(rows), dtype=np.int64)
            counts[sub] = batch.counts
            np.cumsum(counts, out=offsets[1:])
            pieces["coords"].append(batch.coords)
            pieces["positions"].append(batch.positions)
            pieces["deltas"].append(batch.deltas)
            ray_of = np.repeat(sub, batch.counts)
            pieces["dirs"].append(dirs[rows][ray_of])
            pieces["fidx"].append(np.full(batch.num_samples, len(unique_frames),
                                          dtype=np.int64))
        piece_offsets.append(offsets[1:] + piece_offsets[-1][-1])
        unique_frames.append(f)

    ray_order = np.concatenate(ray_order) if ray_order else np.zeros(0, dtype=np.int64)
    offsets = np.concatenate(piece_offsets)
    if offsets[-1] == 0:
        pixels = np.tile(bg, (len(frames), 1))
        return ray_order, pixels, None
    coords = np.concatenate(pieces["coords"])
    positions = np.concatenate(pieces["positions"])
    deltas = np.concatenate(pieces["deltas"])
    sample_dirs = np.concatenate(pieces["dirs"])
    sample_frame = np.concatenate(pieces["fidx"])
    pose_vecs = cache.pose_vecs[np.array(unique_frames, dtype=np.int64)]

    net_in = positions if mode == "no_projection" else coords
    sigma, rgb, eval_cache = nets.evaluate(net_in, sample_dirs, pose_vecs,
                                           sample_frame, mode,
                                           want_grads=want_grads)
    pixels, _, comp_cache = composite_rays(sigma, rgb, deltas, offsets, bg)

    if not want_grads:
        return ray_order, pixels, None
    _, grad_pix = photometric_loss(pixels, gt[ray_order])
    grad_pix *= len(frames) / batch_size    # chunk-local mean -> batch mean
    grad_sigma, grad_rgb = composite_backward(comp_cache, grad_pix)
    dt = nets.config.np_dtype()
    grads = nets.evaluate_backward(eval_cache, grad_sigma.astype(dt),
                                   grad_rgb.astype(dt))
    return ray_order, pixels, grads


def train_step(state: TrainState, cache: DatasetCache) -> LossRecord:
    """One optimizer step on a fresh random ray batch."""
    cfg = state.config
    ds = cache.dataset
    if not ds.train_frames or not ds.train_cameras:
        raise ValueError("train split is empty")
    t0 = time.perf_counter()
    rng = state.rng
    b = cfg.batch_rays
    frames = np.asarray(ds.train_frames)[rng.integers(0, len(ds.train_frames), b)]
    cams = np.asarray(ds.train_cameras)[rng.integers(0, len(ds.train_cameras), b)]
    px = rng.integers(0, ds.spec.width, b)
    py = rng.integers(0, ds.spec.height, b)
    jitter = rng.random((b, cfg.samples_per_ray))
    gt = ds.images[frames, cams, py, px].astype(np.float64)

    chunks = [(i, min(i + TRAIN_CHUNK, b)) for i in range(0, b, TRAIN_CHUNK)]

    def run(bounds):
        lo, hi = bounds
        ray_order, pixels, grads = _render_ray_chunk(
            state.nets, cache, cfg.mode, frames[lo:hi], cams[lo:hi],
            px[lo:hi], py[lo:hi], jitter[lo:hi], cfg.samples_per_ray,
            cfg.delta_n, True, b, gt[lo:hi])
        sq = float(np.sum((pixels - gt[lo:hi][ray_order]) ** 2))
        return sq, grads

    if cfg.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    store = GradientStore(state.nets.params())
    sq_total = 0.0
    for sq, grads in results:        # fixed merge order: chunk index
        sq_total += sq
        if grads is not None:
            store.accumulate(grads)
    loss = sq_total / b

    state.hyper.learning_rate = cfg.lr_at(state.iteration)
    adam_step(state.nets.params(), store.grads, state.adam, state.hyper)
    state.iteration += 1
    return LossRecord(iteration=state.iteration, loss=loss,
                      wall_clock=time.perf_counter() - t0)


def held_out_loss(state: TrainState, cache: DatasetCache,
                  num_rays: int = 1024, seed: int = 12345) -> float:
    """Photometric loss on a fixed held-out ray batch (train frames, test cameras)."""
    ds = cache.dataset
    rng = np.random.default_rng(seed)
    frames = np.asarray(ds.train_frames)[rng.integers(0, len(ds.train_frames), num_rays)]
    cams = np.asarray(ds.test_cameras)[rng.integers(0, len(ds.test_cameras), num_rays)]
    px = rng.integers(0, ds.spec.width, num_rays)
    py = rng.integers(0, ds.spec.height, num_rays)
    gt = ds.images[frames, cams, py, px].astype(np.float64)
    jitter = np.full((num_rays, state.config.samples_per_ray), 0.5)
    ray_order, pixels, _ = _render_ray_chunk(
        state.nets, cache, state.config.mode, frames, cams, px, py, jitter,
        state.config.samples_per_ray, state.config.delta_n, False, num_rays)
    loss, _ = photometric_loss(pixels, gt[ray_order])
    return loss


def train(state: TrainState, cache: DatasetCache, iterations: int,
          log_path: str | Path | None = None,
          checkpoint_dir: str | Path | None = None,
          on_record=None) -> list[LossRecord]:
    """Run train_step repeatedly with logging and periodic checkpoints."""
    records = []
    log_f = open(log_path, "a") if log_path else None
    try:
        for _ in range(iterations):
            rec = train_step(state, cache)
            if state.config.psnr_every and rec.iteration % state.config.psnr_every == 0:
                rec.train_psnr = _train_view_psnr(state, cache)
            records.append(rec)
            if log_f:
                log_f.write(rec.log_line() + "\n")
            if on_record:
                on_record(rec)
            if (checkpoint_dir and state.config.checkpoint_every
                    and rec.iteration % state.config.checkpoint_every == 0):
                save_checkpoint(state, Path(checkpoint_dir) /
                                f"ckpt_{rec.iteration:07d}.bft")
        if log_f:
            log_f.flush()
    finally:
        if log_f:
            log_f.close()
    return records


def _train_view_psnr(state: TrainState, cache: DatasetCache) -> float:
    from .metrics import psnr
    from .rendering import render_image
    ds = cache.dataset
    t, k = ds.train_frames[0], ds.train_cameras[0]
    opts = RenderOptions(background=tuple(ds.background),
                         delta_n=state.config.delta_n,
                         samples_per_ray=state.config.samples_per_ray,
                         mode=state.config.mode)
    img = render_image(ds.model, state.nets, ds.poses[t], ds.shape,
                       ds.cameras[k], opts)
    return psnr(img, ds.images[t, k].astype(np.float64))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Parameters, Adam moments, iteration, and RNG state; resume is exact."""
    tensors = dict(state.nets.params())
    for k, v in state.adam.m.items():
        tensors[f"adam.m.{k}"] = v
    for k, v in state.adam.v.items():
        tensors[f"adam.v.{k}"] = v
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "adam_t": state.adam.t,
        "rng_state": state.rng.bit_generator.state,
        "training_config": asdict(state.config),
        "field_config": asdict(state.nets.config),
        "num_joints": state.nets.num_joints,
    }
    tensorio.save_tensors(path, tensors, meta)


def load_checkpoint(path: str | Path) -> TrainState:
    tensors, meta = tensorio.load_tensors(path)
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version "
            f"{meta.get('checkpoint_version')!r} (expected {CHECKPOINT_VERSION})")
    fc_dict = dict(meta["field_config"])
    fc_dict["deform_scale"] = tuple(fc_dict["deform_scale"])
    fc = FieldConfig(**fc_dict)
    config = TrainingConfig(**meta["training_config"])
    nets = FieldNets(int(meta["num_joints"]), fc, seed=0)
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    nets.load_params(params)
    adam = AdamState(nets.params())
    for k in adam.m:
        adam.m[k][...] = tensors[f"adam.m.{k}"]
        adam.v[k][...] = tensors[f"adam.v.{k}"]
    adam.t = int(meta["adam_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(nets, config, adam=adam, rng=rng,
                      iteration=int(meta["iteration"]))
