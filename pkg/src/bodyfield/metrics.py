"""Image-quality metrics and dataset-level evaluation.

PSNR assumes a [0, 1] dynamic range and returns +inf for identical images
(the documented sentinel). SSIM is pinned to one variant so numbers are
comparable across implementations: 11x11 Gaussian window with sigma 1.5,
C1 = 0.01^2, C2 = 0.03^2, computed per channel over fully interior windows
and averaged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .rendering import RenderOptions, render_image
from .scene import FrameDataset

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) in dB; +inf when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed structural similarity, channel-averaged, on [0, 1] images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def filt(img):
        return np.stack([fftconvolve(img[..., c], win, mode="valid")
                         for c in range(img.shape[2])], axis=-1)

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Split evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    split: str
    per_image: list[dict]        # {"frame", "camera", "psnr", "ssim"}
    mean_psnr: float
    mean_ssim: float
    config: dict

    def to_json(self) -> str:
        payload = {"split": self.split, "per_image": self.per_image,
                   "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim,
                   "config": self.config}
        return json.dumps(payload, sort_keys=True, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return EvalReport(split=d["split"], per_image=d["per_image"],
                          mean_psnr=d["mean_psnr"], mean_ssim=d["mean_ssim"],
                          config=d["config"])

    def table(self) -> str:
        lines = [f"split: {self.split}",
                 f"{'frame':>6} {'camera':>6} {'psnr_db':>9} {'ssim':>7}"]
        for row in self.per_image:
            lines.append(f"{row['frame']:>6} {row['camera']:>6} "
                         f"{row['psnr']:>9.3f} {row['ssim']:>7.4f}")
        lines.append(f"mean psnr {self.mean_psnr:.3f} dB, mean ssim {self.mean_ssim:.4f}")
        return "\n".join(lines)


def evaluate(nets, dataset: FrameDataset, split: str,
             options: RenderOptions | None = None) -> EvalReport:
    """Render every (frame, camera) pair of the split and score against truth.

    novel_view renders training frames from held-out cameras; novel_pose
    renders held-out frames from every camera.
    """
    pairs = dataset.split_pairs(split)
    if not pairs:
        raise ValueError(f"split {split!r} is empty for this dataset")
    opts = options or RenderOptions(background=tuple(dataset.background))
    rows = []
    for t, k in pairs:
        img = render_image(dataset.model, nets, dataset.poses[t], dataset.shape,
                           dataset.cameras[k], opts)
        truth = dataset.images[t, k].astype(np.float64)
        rows.append({"frame": t, "camera": k,
                     "psnr": psnr(img, truth), "ssim": ssim(img, truth)})
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    return EvalReport(split=split, per_image=rows, mean_psnr=mean_psnr,
                      mean_ssim=mean_ssim,
                      config={"mode": opts.mode, "delta_n": opts.delta_n,
                              "samples_per_ray": opts.samples_per_ray})


def evaluate_ground_truth(dataset: FrameDataset, split: str) -> EvalReport:
    """Sanity route: score the ground truth against itself (sentinel PSNR, SSIM 1)."""
    pairs = dataset.split_pairs(split)
    if not pairs:
        raise ValueError(f"split {split!r} is empty for this dataset")
    rows = []
    for t, k in pairs:
        truth = dataset.images[t, k].astype(np.float64)
        rows.append({"frame": t, "camera": k,
                     "psnr": psnr(truth, truth), "ssim": ssim(truth, truth)})
    return EvalReport(split=split, per_image=rows,
                      mean_psnr=float(np.mean([r["psnr"] for r in rows])),
                      mean_ssim=float(np.mean([r["ssim"] for r in rows])),
                      config={"mode": "ground_truth"})
