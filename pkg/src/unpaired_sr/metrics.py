"""Full-reference image quality: PSNR and luminance SSIM.

Learned or no-reference perceptual scores (LPIPS, PI, ...) are not computed
here; :func:`run_external_metric` calls an outside program instead.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import CorpusError, ShapeError
from .imaging import load_image

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
C1 = 0.01**2
C2 = 0.03**2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for peak value 1.0; ``math.inf`` for identical images."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def luminance(img: np.ndarray) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    return r * img[:, 0] + g * img[:, 1] + b * img[:, 2]


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_plane(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> float:
    def filt(z):
        return convolve2d(z, win, mode="valid")

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    num = (2 * mx * my + C1) * (2 * cxy + C2)
    den = (mx * mx + my * my + C1) * (vx + vy + C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean SSIM of the Rec.601 luminance (11x11 Gaussian window, sigma 1.5).

    Batched inputs give the mean over the batch.
    """
    a, b = _pair(a, b)
    if a.ndim != 4 or a.shape[1] != 3:
        raise ShapeError(f"expected (batch, 3, H, W), got {a.shape}")
    if min(a.shape[-2:]) < 11:
        raise ValueError(f"SSIM needs images of at least 11x11, got {a.shape[-2:]}")
    win = gaussian_window()
    la, lb = luminance(a), luminance(b)
    return float(np.mean([_ssim_plane(x, y, win) for x, y in zip(la, lb)]))


def crop_border(img: np.ndarray, border: int) -> np.ndarray:
    if border <= 0:
        return img
    return img[..., border:-border, border:-border]


@dataclass
class MetricReport:
    per_image: dict[str, dict[str, float]]
    mean_psnr: float
    mean_ssim: float
    n_infinite_psnr: int = 0
    unmatched: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(v):
            return "infinite" if isinstance(v, float) and math.isinf(v) else v

        return {
            "per_image": {k: {m: enc(v) for m, v in d.items()} for k, d in self.per_image.items()},
            "mean_psnr": enc(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "n_infinite_psnr": self.n_infinite_psnr,
            "unmatched": self.unmatched,
            "extra": self.extra,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["filename", "psnr", "ssim"])
            for name, d in self.per_image.items():
                w.writerow([name, d["psnr"], d["ssim"]])


def summarize(per_image: dict[str, dict[str, float]], unmatched=()) -> MetricReport:
    finite = [d["psnr"] for d in per_image.values() if math.isfinite(d["psnr"])]
    n_inf = len(per_image) - len(finite)
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    mean_ssim = float(np.mean([d["ssim"] for d in per_image.values()]))
    return MetricReport(per_image, mean_psnr, mean_ssim, n_inf, list(unmatched))


def evaluate_corpus(result_dir, reference_dir, border_crop: int) -> MetricReport:
    """PSNR/SSIM for every filename present in both directories.

    Infinite PSNRs (identical images) are left out of the PSNR mean and
    counted separately. Files present on one side only are listed in
    ``unmatched``.
    """
    exts = {".png", ".jpg", ".jpeg"}
    res = {p.name: p for p in Path(result_dir).iterdir() if p.suffix.lower() in exts}
    ref = {p.name: p for p in Path(reference_dir).iterdir() if p.suffix.lower() in exts}
    common = sorted(set(res) & set(ref))
    if not common:
        raise CorpusError(f"no filenames shared by {result_dir} and {reference_dir}")
    unmatched = sorted(set(res) ^ set(ref))
    per_image = {}
    for name in common:
        a = crop_border(load_image(res[name]), border_crop)
        b = crop_border(load_image(ref[name]), border_crop)
        per_image[name] = {"psnr": psnr(a, b), "ssim": ssim(a, b)}
    return summarize(per_image, unmatched)


def run_external_metric(command: list[str], result_dir, reference_dir) -> dict:
    """Run ``command + [result_dir, reference_dir]`` and parse its JSON stdout."""
    proc = subprocess.run([*command, str(result_dir), str(reference_dir)],
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)
