"""Procedural test world with a known degradation, for desk-scale runs.

The corpus mimics a paired-capture dataset: every HR image has an "oracle"
real LR counterpart produced by blur, bicubic shrinking and sensor noise.
Training only ever sees the unpaired, non-overlapping halves; the paired
copies under ``hidden/`` exist for measurement.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging
from .datasets import GeneratedPairSet, split_indices


def _band_noise(rng, size, sigma):
    from scipy.ndimage import gaussian_filter

    field = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    field -= field.mean()
    return field / (field.std() + 1e-12)


def procedural_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """One (1, 3, size, size) image mixing gradients, checkers and textures.

    Every ingredient is spatially stationary and drawn from the same
    distribution for every image, so any subset of images has roughly the
    same colour and content statistics. The domain gap between real and
    bicubic LR is then carried by the degradation alone.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    # smooth colour field around mid-grey (the "gradient" component)
    img = 0.5 + 0.18 * np.stack([_band_noise(rng, size, size / 8) for _ in range(3)])

    period = rng.uniform(4.0, 14.0)
    theta = rng.uniform(0, np.pi)
    u = (np.cos(theta) * xx + np.sin(theta) * yy) * size / period
    v = (-np.sin(theta) * xx + np.cos(theta) * yy) * size / period
    checks = (np.floor(u) + np.floor(v)) % 2
    region = _band_noise(rng, size, size / 10) > 0.0
    img = img + 0.35 * (checks - 0.5)[None] * region[None]

    tex = np.stack([_band_noise(rng, size, rng.uniform(0.7, 2.0)) for _ in range(3)])
    img = img + 0.05 * tex

    for _ in range(int(rng.integers(4, 9))):
        cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.04, 0.12)
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
        img = np.where(disk[None], rng.uniform(0.1, 0.9, 3)[:, None, None], img)
    return np.clip(img, 0.0, 1.0)[None]


def oracle_degrade(hr: np.ndarray, scale: int, blur_sigma: float, noise_sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Gaussian blur, bicubic shrink by ``scale``, additive Gaussian noise, clamp."""
    x = imaging.gaussian_blur(hr.astype(np.float64), blur_sigma)
    x = imaging.bicubic_resize(x, 1.0 / scale)
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0)


@dataclass(frozen=True)
class SmokeCorpus:
    root: Path
    lr_dir: Path
    hr_dir: Path
    hidden_hr_dir: Path
    hidden_lr_dir: Path
    manifest: Path
    hr_indices: tuple[int, ...]
    lr_indices: tuple[int, ...]
    scale: int

    def held_out_names(self) -> list[str]:
        """Images whose LR side is in the training set but whose HR side is not."""
        return [_name(i) for i in self.lr_indices]


def _name(i: int) -> str:
    return f"img_{i:04d}.png"


def make_smoke_corpus(out_dir, n: int = 24, hr_size: int = 96, scale: int = 4,
                      blur_sigma: float = 1.2, noise_sigma: float = 0.01, seed: int = 0,
                      n_prime: int | None = None) -> SmokeCorpus:
    """Write a procedural corpus with a known degradation.

    Layout: ``hidden/hr`` and ``hidden/lr`` hold all ``n`` aligned pairs
    (plus ``hidden/pairs.tsv``); ``hr/`` and ``lr/`` hold the disjoint
    training halves (``n_prime`` HR images, the rest LR). ``n_prime``
    defaults to two thirds of ``n``.
    """
    if n < 2:
        raise ValueError("smoke corpus needs at least two images")
    if hr_size % scale:
        raise ValueError(f"hr_size {hr_size} is not divisible by {scale}")
    n_prime = n * 2 // 3 if n_prime is None else n_prime
    if not 0 < n_prime < n:
        raise ValueError(f"n_prime must be in (0, {n})")
    root = Path(out_dir)
    if root.exists():
        shutil.rmtree(root)
    dirs = {k: root / k for k in ("hr", "lr", "hidden/hr", "hidden/lr")}
    for d in dirs.values():
        d.mkdir(parents=True)
    content_rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2])
    pairs = []
    for i in range(n):
        hr = procedural_image(content_rng, hr_size)
        hr = imaging.quantize(hr).astype(np.float64) / 255.0
        lr = oracle_degrade(hr, scale, blur_sigma, noise_sigma, noise_rng)
        imaging.save_image(hr, dirs["hidden/hr"] / _name(i))
        imaging.save_image(lr, dirs["hidden/lr"] / _name(i))
        pairs.append((Path("lr") / _name(i), Path("hr") / _name(i)))
    GeneratedPairSet(tuple(pairs), f"oracle-blur{blur_sigma}-noise{noise_sigma}",
                     scale).write_manifest(root / "hidden" / "pairs.tsv")
    hr_idx, lr_idx = split_indices(n, n_prime, np.random.default_rng([seed, 3]))
    for i in hr_idx:
        shutil.copyfile(dirs["hidden/hr"] / _name(i), dirs["hr"] / _name(i))
    for i in lr_idx:
        shutil.copyfile(dirs["hidden/lr"] / _name(i), dirs["lr"] / _name(i))
    return SmokeCorpus(root, dirs["lr"], dirs["hr"], dirs["hidden/hr"], dirs["hidden/lr"],
                       root / "hidden" / "pairs.tsv", tuple(int(i) for i in hr_idx),
                       tuple(int(i) for i in lr_idx), scale)
