"""Image I/O, bicubic resampling, cropping and augmentation.

Images are numpy arrays shaped ``(batch, 3, height, width)`` with values in
``[0, 1]``. Floating dtypes are preserved; resampling accumulates in float64.
"""

from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .errors import ShapeError, UnsupportedFormatError

Scale = Union[int, float, Fraction]

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _png_bit_depth(path: Path) -> int | None:
    with open(path, "rb") as fh:
        head = fh.read(29)
    if not head.startswith(_PNG_SIGNATURE) or len(head) < 25:
        return None
    return head[24]


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG or JPEG as a float32 array of shape (1, 3, H, W)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    depth = _png_bit_depth(path)
    if depth is not None and depth != 8:
        raise UnsupportedFormatError(f"{path}: {depth}-bit PNG, expected 8-bit")
    with Image.open(path) as im:
        if im.format not in ("PNG", "JPEG"):
            raise UnsupportedFormatError(f"{path}: format {im.format} not supported")
        if im.mode != "RGB":
            raise UnsupportedFormatError(f"{path}: mode {im.mode}, expected RGB")
        raw = np.asarray(im, dtype=np.uint8)
    return (raw.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to bytes with round-half-away-from-zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write a single image (batch of one) as an 8-bit RGB PNG."""
    img = np.asarray(img)
    if img.ndim != 4 or img.shape[0] != 1 or img.shape[1] != 3:
        raise ShapeError(f"save_image expects shape (1, 3, H, W), got {img.shape}")
    path = Path(path)
    data = quantize(img[0]).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(data)).save(path, format="PNG")


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    far = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def output_size(n: int, scale: Scale) -> int:
    return int(math.floor(n * float(scale) + 0.5))


def resample_taps(in_len: int, out_len: int, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-sample source indices and weights for one axis.

    Sample centres follow the half-pixel convention. On downscale the kernel
    is stretched by ``1/scale``. Taps falling outside the signal are folded
    back by symmetric reflection, so weights always sum to one.
    """
    if scale < 1.0:
        width = 4.0 / scale

        def kernel(t):
            return scale * cubic_kernel(scale * t)
    else:
        width = 4.0
        kernel = cubic_kernel
    centre = (np.arange(out_len, dtype=np.float64) + 0.5) / scale - 0.5
    left = np.floor(centre - width / 2.0).astype(np.int64)
    n_taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(n_taps)[None, :]
    w = kernel(centre[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    period = 2 * in_len
    folded = np.mod(idx, period)
    folded = np.where(folded >= in_len, period - 1 - folded, folded)
    return folded, w


def _resample_axis(x: np.ndarray, axis: int, out_len: int, scale: float) -> np.ndarray:
    idx, w = resample_taps(x.shape[axis], out_len, scale)
    moved = np.moveaxis(x, axis, -1)
    gathered = moved[..., idx]  # (..., out_len, n_taps)
    out = np.einsum("...ot,ot->...o", gathered, w)
    return np.moveaxis(out, -1, axis)


def bicubic_resize(img: np.ndarray, scale: Scale) -> np.ndarray:
    """Separable bicubic resampling (a = -0.5), anti-aliased when shrinking.

    Output height and width are ``round(dim * scale)``; values are clamped
    back into [0, 1].
    """
    s = float(scale)
    if not s > 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    img = np.asarray(img)
    if img.ndim != 4:
        raise ShapeError(f"expected (batch, channels, H, W), got {img.shape}")
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32
    h, w = img.shape[-2:]
    oh, ow = output_size(h, scale), output_size(w, scale)
    if oh < 1 or ow < 1:
        raise ValueError(f"scale {scale} collapses a {h}x{w} image")
    x = img.astype(np.float64)
    x = _resample_axis(x, 2, oh, s)
    x = _resample_axis(x, 3, ow, s)
    return np.clip(x, 0.0, 1.0).astype(dtype)


def _offsets(h: int, w: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    if size < 1 or size > min(h, w):
        raise ValueError(f"crop size {size} does not fit a {h}x{w} image")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return y, x


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Square crop at a uniformly drawn offset (same offset for the whole batch)."""
    y, x = _offsets(img.shape[-2], img.shape[-1], size, rng)
    return img[..., y:y + size, x:x + size]


def paired_crop(hr: np.ndarray, lr: np.ndarray, lr_size: int, scale: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Spatially corresponding crops: LR at (y, x), HR at (y*scale, x*scale)."""
    lh, lw = lr.shape[-2:]
    if hr.shape[-2:] != (lh * scale, lw * scale):
        raise ShapeError(
            f"HR {hr.shape[-2:]} is not LR {lr.shape[-2:]} times {scale}")
    y, x = _offsets(lh, lw, lr_size, rng)
    hs = lr_size * scale
    lr_patch = lr[..., y:y + lr_size, x:x + lr_size]
    hr_patch = hr[..., y * scale:y * scale + hs, x * scale:x * scale + hs]
    return hr_patch, lr_patch


def augment(img: np.ndarray, rng: np.random.Generator, hflip: bool = True,
            rot90: bool = True) -> np.ndarray:
    """Random horizontal flip and 90-degree rotation, each with probability 0.5.

    Both coin flips are always drawn so the generator advances identically
    whichever transforms are enabled.
    """
    do_flip, do_rot = rng.random(2) < 0.5
    out = img
    if hflip and do_flip:
        out = out[..., ::-1]
    if rot90 and do_rot:
        out = np.rot90(out, k=1, axes=(-2, -1))
    return np.ascontiguousarray(out)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur with reflected borders; sigma 0 is a no-op."""
    if sigma <= 0:
        return img.copy()
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(img, sigma=(0, 0, sigma, sigma), mode="reflect").astype(img.dtype)
