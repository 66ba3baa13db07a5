"""Procedural HR image corpus for demos and the desk-scale acceptance runs.

The generator favors structure that survives 4x downsampling: high-contrast
rectangles, thick lines, oriented stripe bands, and coarse band-limited
texture over smooth gradients. Sub-pixel patterns would read as unlearnable
noise to a super-resolver and drown the training signal; edges are where the
task lives.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import ImageTensor, write_png


def toy_image(size: int, seed: int) -> ImageTensor:
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size

    img = np.zeros((h, w, 3))
    base = rng.uniform(0.25, 0.75, size=3)
    tilt = rng.uniform(-0.25, 0.25, size=(2, 3))
    for c in range(3):
        img[..., c] = base[c] + tilt[0, c] * xx + tilt[1, c] * yy

    # high-contrast rectangles: step edges at many positions and contrasts
    for _ in range(rng.integers(6, 12)):
        y0, x0 = rng.integers(0, h - 6), rng.integers(0, w - 6)
        y1 = y0 + int(rng.integers(6, max(7, h // 2)))
        x1 = x0 + int(rng.integers(6, max(7, w // 2)))
        img[y0 : min(y1, h), x0 : min(x1, w)] += rng.uniform(-0.5, 0.5, size=3)

    # thick lines (2-4 px) stay visible after 4x downsampling
    for _ in range(rng.integers(5, 10)):
        thick = int(rng.integers(2, 5))
        if rng.uniform() < 0.5:
            r = int(rng.integers(0, h - thick))
            img[r : r + thick, :] += rng.uniform(-0.6, 0.6, size=3)
        else:
            c = int(rng.integers(0, w - thick))
            img[:, c : c + thick] += rng.uniform(-0.6, 0.6, size=3)

    # an oriented stripe band with a coarse period: repeated oriented edges
    for _ in range(rng.integers(1, 3)):
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(8, 24)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) * size / period + phase)
        stripes = np.tanh(3.0 * wave)  # soft-square profile
        ph = int(rng.integers(h // 4, h // 2 + 1))
        pw = int(rng.integers(w // 4, w // 2 + 1))
        y0, x0 = rng.integers(0, h - ph + 1), rng.integers(0, w - pw + 1)
        amp = rng.uniform(0.15, 0.35)
        img[y0 : y0 + ph, x0 : x0 + pw] += (
            amp * stripes[y0 : y0 + ph, x0 : x0 + pw, None] * rng.uniform(0.6, 1.0, 3)
        )

    # coarse band-limited texture over part of the image; untouched smooth
    # regions are where degradations are visible and restoration pays off
    texture = gaussian_filter(rng.standard_normal((h, w)), sigma=rng.uniform(1.5, 3.0))
    peak = np.abs(texture).max()
    if peak > 0:
        mask = gaussian_filter(rng.standard_normal((h, w)), sigma=h / 8.0)
        mask = (mask > np.quantile(mask, rng.uniform(0.35, 0.65))).astype(np.float64)
        img += rng.uniform(0.15, 0.3) * (texture / peak * mask)[..., None]

    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-9)
    return ImageTensor(0.03 + 0.94 * img)


def write_toy_corpus(out_dir: str | Path, count: int, size: int = 128, seed: int = 0) -> list[Path]:
    """Write `count` PNG images of side `size`; deterministic in (seed, index)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = out_dir / f"toy_{i:04d}.png"
        write_png(toy_image(size, seed * 100003 + i), p)
        paths.append(p)
    return paths
