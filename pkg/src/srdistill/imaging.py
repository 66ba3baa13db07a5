"""Image containers, color conversion, Haar wavelets, resampling, and patch cropping.

Images live in [0, 1] floating point with an explicit color-space tag. All
functions here are pure: they never mutate their inputs and any clipping back
into [0, 1] is an explicit step, never hidden inside arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidInputError, InvalidShapeError

RGB = "rgb"
YCBCR = "ycbcr"

# BT.601 full-range luma coefficients.
_KR, _KG, _KB = 0.299, 0.587, 0.114


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C float image in [0, 1] with a color-space tag."""

    data: np.ndarray
    colorspace: str = RGB
    meta: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise InvalidShapeError(f"image must be HxWx1 or HxWx3, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("image contains non-finite values")
        if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
            raise InvalidInputError(
                f"image values outside [0,1]: min={arr.min():.6g} max={arr.max():.6g}"
            )
        if self.colorspace not in (RGB, YCBCR):
            raise InvalidInputError(f"unknown colorspace {self.colorspace!r}")
        object.__setattr__(self, "data", np.clip(arr, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def rgb_to_ycbcr(img: ImageTensor) -> ImageTensor:
    """BT.601 full-range RGB -> YCbCr. The Y channel comes out as channel 0."""
    if img.colorspace != RGB or img.channels != 3:
        raise InvalidInputError("rgb_to_ycbcr expects a 3-channel RGB image")
    r, g, b = img.data[..., 0], img.data[..., 1], img.data[..., 2]
    y = _KR * r + _KG * g + _KB * b
    cb = (b - y) / (2.0 * (1.0 - _KB)) + 0.5
    cr = (r - y) / (2.0 * (1.0 - _KR)) + 0.5
    out = np.stack([y, cb, cr], axis=-1)
    # Valid RGB maps inside the cube up to rounding; make the clip explicit.
    return ImageTensor(np.clip(out, 0.0, 1.0), colorspace=YCBCR, meta=img.meta)


def y_channel(img: ImageTensor) -> np.ndarray:
    """Luma plane of an image; converts from RGB when necessary."""
    if img.colorspace == YCBCR:
        return img.data[..., 0]
    return rgb_to_ycbcr(img).data[..., 0]


@dataclass
class WaveletSubbands:
    """Multi-level orthonormal Haar decomposition of an H x W x C image.

    `detail[k]` holds the (LH, HL, HH) arrays of level k+1 (finest first),
    each of shape (H/2^(k+1), W/2^(k+1), C); `ll` is the coarsest low-pass.
    """

    levels: int
    ll: np.ndarray
    detail: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)


def _haar_split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, lh, hl, hh


def _haar_merge(ll, lh, hl, hh) -> np.ndarray:
    h, w = ll.shape[0] * 2, ll.shape[1] * 2
    out = np.empty((h, w) + ll.shape[2:], dtype=np.float64)
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


def haar_forward(img: ImageTensor, levels: int = 1) -> WaveletSubbands:
    """Orthonormal 2-D Haar decomposition, recursing on the low-pass band.

    Requires H and W divisible by 2**levels; energy is preserved exactly up
    to float rounding because the 2x2 analysis matrix is orthonormal.
    """
    if levels < 1:
        raise InvalidInputError("levels must be >= 1")
    h, w = img.height, img.width
    if h % (2**levels) or w % (2**levels):
        raise InvalidShapeError(f"{h}x{w} not divisible by 2^{levels}")
    detail = []
    low = img.data
    for _ in range(levels):
        low, lh, hl, hh = _haar_split(low)
        detail.append((lh, hl, hh))
    return WaveletSubbands(levels=levels, ll=low, detail=detail)


def haar_inverse(sub: WaveletSubbands) -> ImageTensor:
    """Exact inverse of haar_forward; output is clipped back to [0, 1]."""
    low = sub.ll
    for lh, hl, hh in reversed(sub.detail):
        if lh.shape != low.shape or hl.shape != low.shape or hh.shape != low.shape:
            raise InvalidShapeError("subband shapes are inconsistent")
        low = _haar_merge(low, lh, hl, hh)
    return ImageTensor(np.clip(low, 0.0, 1.0))


def haar_dwt2d(t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Single-level orthonormal Haar on a (B, C, H, W) tensor; differentiable.

    Matches haar_forward's level-1 coefficients (same normalization and
    subband order LL, LH, HL, HH).
    """
    if t.shape[-1] % 2 or t.shape[-2] % 2:
        raise InvalidShapeError(f"spatial dims must be even, got {tuple(t.shape[-2:])}")
    a = t[..., 0::2, 0::2]
    b = t[..., 0::2, 1::2]
    c = t[..., 1::2, 0::2]
    d = t[..., 1::2, 1::2]
    return (
        (a + b + c + d) / 2.0,
        (a - b + c - d) / 2.0,
        (a + b - c - d) / 2.0,
        (a - b - c + d) / 2.0,
    )


# ---------------------------------------------------------------------------
# Resampling (cubic convolution kernel, a = -0.5, antialiased on downscale)
# ---------------------------------------------------------------------------


def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    a = -0.5
    ax = np.abs(x)
    out = np.zeros_like(ax)
    m1 = ax <= 1
    m2 = (ax > 1) & (ax < 2)
    out[m1] = (a + 2) * ax[m1] ** 3 - (a + 3) * ax[m1] ** 2 + 1
    out[m2] = a * ax[m2] ** 3 - 5 * a * ax[m2] ** 2 + 8 * a * ax[m2] - 4 * a
    return out


def _linear_kernel(x: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - np.abs(x), 0.0, None)


def _resample_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """Row-stochastic weight matrix mapping n_in samples to n_out along one axis.

    Output coordinate i samples input coordinate (i + 0.5) * n_in / n_out - 0.5;
    when shrinking, the kernel is stretched by the scale ratio to antialias.
    Out-of-range taps are clamped to the edge (replicate padding).
    """
    ratio = n_in / n_out
    coords = (np.arange(n_out) + 0.5) * ratio - 0.5
    if mode == "nearest":
        idx = np.clip(np.round(coords).astype(int), 0, n_in - 1)
        mat = np.zeros((n_out, n_in))
        mat[np.arange(n_out), idx] = 1.0
        return mat
    if mode == "bicubic":
        kernel, support = _cubic_kernel, 2.0
    elif mode == "bilinear":
        kernel, support = _linear_kernel, 1.0
    else:
        raise InvalidInputError(f"unknown resize mode {mode!r}")
    stretch = max(ratio, 1.0)
    half = support * stretch
    mat = np.zeros((n_out, n_in))
    for i, c in enumerate(coords):
        lo = int(np.floor(c - half)) + 1
        hi = int(np.ceil(c + half))
        taps = np.arange(lo, hi + 1)
        w = kernel((c - taps) / stretch)
        w_sum = w.sum()
        if w_sum <= 0:
            raise InvalidInputError("degenerate resampling window")
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w / w_sum)
    return mat


def resize(img: ImageTensor, out_h: int, out_w: int, mode: str = "bicubic") -> ImageTensor:
    """Separable resample to (out_h, out_w); result clipped to [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise InvalidShapeError(f"target size {out_h}x{out_w} is empty")
    rows = _resample_matrix(img.height, out_h, mode)
    cols = _resample_matrix(img.width, out_w, mode)
    out = np.einsum("ij,jkc->ikc", rows, img.data)
    out = np.einsum("kj,ijc->ikc", cols, out)
    return ImageTensor(np.clip(out, 0.0, 1.0), colorspace=img.colorspace, meta=img.meta)


def bicubic_downsample(hr: ImageTensor, scale: int) -> ImageTensor:
    """Antialiased bicubic downscale by an integer factor."""
    if scale < 1:
        raise InvalidInputError(f"scale must be >= 1, got {scale}")
    if hr.height % scale or hr.width % scale:
        raise InvalidShapeError(f"{hr.height}x{hr.width} not divisible by scale {scale}")
    if scale == 1:
        return hr
    return resize(hr, hr.height // scale, hr.width // scale, mode="bicubic")


def paired_random_crop(
    lr: ImageTensor, hr: ImageTensor, lr_size: int, scale: int, seed: int
) -> tuple[ImageTensor, ImageTensor]:
    """Crop an lr_size patch from LR and the matching scale*lr_size patch from HR.

    Offsets are drawn from a generator seeded with `seed`, so the same seed
    always yields the same crop; the HR offset is exactly scale times the LR
    offset.
    """
    if hr.height != scale * lr.height or hr.width != scale * lr.width:
        raise InvalidInputError(
            f"HR {hr.height}x{hr.width} is not {scale}x the LR {lr.height}x{lr.width}"
        )
    if lr.height < lr_size or lr.width < lr_size:
        raise InvalidInputError(f"LR {lr.height}x{lr.width} smaller than patch {lr_size}")
    rng = np.random.default_rng(seed)
    i = int(rng.integers(0, lr.height - lr_size + 1))
    j = int(rng.integers(0, lr.width - lr_size + 1))
    assert hr.height >= scale * (i + lr_size) and hr.width >= scale * (j + lr_size)
    lr_patch = ImageTensor(lr.data[i : i + lr_size, j : j + lr_size], lr.colorspace, lr.meta)
    hi, hj, hs = scale * i, scale * j, scale * lr_size
    hr_patch = ImageTensor(hr.data[hi : hi + hs, hj : hj + hs], hr.colorspace, hr.meta)
    return lr_patch, hr_patch


# ---------------------------------------------------------------------------
# 8-bit PNG I/O and torch bridging
# ---------------------------------------------------------------------------


def read_png(path: str | Path) -> ImageTensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageTensor(arr, colorspace=RGB, meta=str(path))


def write_png(img: ImageTensor, path: str | Path) -> None:
    Image.fromarray(to_uint8(img.data)).save(path, format="PNG")


def to_uint8(arr: np.ndarray) -> np.ndarray:
    """[0,1] float -> uint8 with round-half-up, the convention used at all I/O edges."""
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def to_tensor(img: ImageTensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """ImageTensor -> (C, H, W) torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.data.transpose(2, 0, 1))).to(dtype)


def from_tensor(t: torch.Tensor, colorspace: str = RGB, meta: str | None = None) -> ImageTensor:
    """(C, H, W) tensor -> ImageTensor; clamps into [0, 1] explicitly."""
    arr = t.detach().cpu().double().clamp(0.0, 1.0).numpy().transpose(1, 2, 0)
    return ImageTensor(arr, colorspace=colorspace, meta=meta)
