"""Frozen convolutional feature extraction, Gram statistics, and descriptor fitting.

Two backbones ship: a fixed-seed random conv stack used by the test and
acceptance suites (random frozen features still induce valid distances), and
a VGG-19-shaped stack that can load externally trained weights from a tensor
archive for realistic runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError, InvalidShapeError
from .imaging import ImageTensor, to_tensor
from .tensorio import load_tensors

# Feature maps per tap, in tap order. Values are (B, C, H, W) tensors.
FeaturePack = dict[str, torch.Tensor]

TOY_TAPS = ("block2_conv2", "block3_conv2", "block4_conv2")

# conv channel plan per block: (in-block conv count handled below)
_TOY_CHANNELS = (16, 32, 64, 64)
_VGG_PLAN = ((2, 64), (2, 128), (4, 256), (4, 512), (4, 512))

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def _build_stack(plan: tuple[tuple[int, int], ...]) -> tuple[nn.ModuleDict, list[str]]:
    """Blocks of 3x3 convs + ReLU with a stride-2 pool between blocks.

    Returns the conv modules keyed by tap name plus the ordered op list; a tap
    named block{i}_conv{j} is the j-th conv output of block i, pre-activation,
    at 1/2^(i-1) of the input resolution.
    """
    convs = nn.ModuleDict()
    ops: list[str] = []
    in_ch = 3
    for bi, (n_convs, ch) in enumerate(plan, start=1):
        if bi > 1:
            ops.append("pool")
        for ci in range(1, n_convs + 1):
            name = f"block{bi}_conv{ci}"
            convs[name] = nn.Conv2d(in_ch, ch, 3, padding=1)
            ops.append(name)
            ops.append("relu")
            in_ch = ch
    return convs, ops


class FeatureExtractor(nn.Module):
    """Immutable multi-tap feature extractor; inputs are RGB in [0, 1].

    `smooth=True` swaps ReLU/max-pool for softplus/avg-pool so the whole
    stack is differentiable everywhere; the finite-difference audits probe
    gradients through it at step 1e-4, which kinked activations would foil.
    """

    def __init__(
        self,
        plan: tuple[tuple[int, int], ...],
        taps: tuple[str, ...],
        normalization: tuple[tuple[float, ...], tuple[float, ...]] | None = None,
        seed: int = 0,
        smooth: bool = False,
    ):
        super().__init__()
        self.convs, self._ops = _build_stack(plan)
        self.smooth = smooth
        known = set(self.convs.keys())
        bad = [t for t in taps if t not in known]
        if bad:
            raise InvalidInputError(f"unknown taps {bad}; available: {sorted(known)}")
        self.taps = tuple(taps)
        gen = torch.Generator().manual_seed(seed)
        for conv in self.convs.values():
            nn.init.kaiming_normal_(conv.weight, generator=gen)
            nn.init.zeros_(conv.bias)
        if normalization is None:
            mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
        else:
            mean, std = normalization
        self.register_buffer("input_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(std).view(1, 3, 1, 1))
        # Pools between blocks, counted up to and including the deepest tap.
        depth = max(int(t.split("_")[0][5:]) for t in self.taps)
        self.min_input = 2 ** (depth - 1)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @staticmethod
    def toy(taps: tuple[str, ...] = TOY_TAPS, seed: int = 0) -> "FeatureExtractor":
        """Small fixed-seed stack (channels 16/32/64/64) with identity normalization."""
        plan = tuple((2, ch) for ch in _TOY_CHANNELS)
        return FeatureExtractor(plan, taps, normalization=None, seed=seed, smooth=True)

    @staticmethod
    def vgg19(
        weights_path: str | Path | None = None,
        taps: tuple[str, ...] = ("block2_conv2", "block3_conv4", "block4_conv4"),
        seed: int = 0,
    ) -> "FeatureExtractor":
        """VGG-19-shaped stack; loads conv weights from a tensor archive when given."""
        ex = FeatureExtractor(_VGG_PLAN, taps, normalization=(_IMAGENET_MEAN, _IMAGENET_STD), seed=seed)
        if weights_path is not None:
            tensors = load_tensors(weights_path)
            for name, conv in ex.convs.items():
                for leaf in ("weight", "bias"):
                    key = f"{name}.{leaf}"
                    if key not in tensors:
                        raise InvalidInputError(f"weight archive is missing {key}")
                    getattr(conv, leaf).data.copy_(torch.from_numpy(tensors[key]))
        return ex

    def forward(self, x: torch.Tensor) -> FeaturePack:
        return self.extract_batch(x)

    def extract_batch(self, x: torch.Tensor) -> FeaturePack:
        """(B, 3, H, W) in [0, 1] -> {tap: (B, C, h, w)}. Pure; no weight updates."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise InvalidShapeError(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        if min(x.shape[2], x.shape[3]) < self.min_input:
            raise InvalidShapeError(
                f"input {x.shape[2]}x{x.shape[3]} smaller than minimum {self.min_input}"
            )
        h = (x - self.input_mean.to(x.dtype)) / self.input_std.to(x.dtype)
        out: FeaturePack = {}
        wanted = set(self.taps)
        for op in self._ops:
            if op == "pool":
                if self.smooth:
                    h = torch.nn.functional.avg_pool2d(h, 2)
                else:
                    h = torch.nn.functional.max_pool2d(h, 2)
            elif op == "relu":
                h = torch.nn.functional.softplus(h) if self.smooth else torch.relu(h)
            else:
                h = self.convs[op](h)
                if op in wanted:
                    out[op] = h
                    if len(out) == len(wanted):
                        break
        return {t: out[t] for t in self.taps}


def extract(img: ImageTensor, ex: FeatureExtractor) -> FeaturePack:
    """Features of a single RGB image; batch dimension is 1."""
    if img.colorspace != "rgb" or img.channels != 3:
        raise InvalidInputError("extract expects a 3-channel RGB image")
    dtype = next(iter(ex.parameters())).dtype
    with torch.no_grad():
        return ex.extract_batch(to_tensor(img, dtype=dtype).unsqueeze(0))


def gram(f: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix G[p,q] = (1/(h*w)) * sum_mn f[p,m,n] f[q,m,n].

    Accepts (C, H, W) or (B, C, H, W); the h*w normalizer makes the statistic
    resolution-independent. Result is symmetric PSD by construction.
    """
    squeeze = f.ndim == 3
    if squeeze:
        f = f.unsqueeze(0)
    if f.ndim != 4:
        raise InvalidShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(f.shape)}")
    if not torch.isfinite(f).all():
        raise InvalidInputError("feature map contains non-finite values")
    b, c, h, w = f.shape
    flat = f.reshape(b, c, h * w)
    g = flat @ flat.transpose(1, 2) / (h * w)
    g = (g + g.transpose(1, 2)) / 2.0
    return g[0] if squeeze else g


@dataclass
class GaussianStats:
    """Sample mean and covariance of pooled feature descriptors."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def regularized(self, eps: float = 1e-6) -> "GaussianStats":
        return GaussianStats(self.mean, self.cov + eps * np.eye(self.dim), self.count)


def pooled_descriptor(pack: FeaturePack, tap: str) -> np.ndarray:
    """Per-channel spatial mean and std, concatenated: length 2C for a C-channel tap."""
    f = pack[tap]
    if f.ndim == 4:
        f = f[0]
    arr = f.detach().double().cpu().numpy()
    return np.concatenate([arr.mean(axis=(1, 2)), arr.std(axis=(1, 2))])


def fit_feature_gaussian(
    images: list[ImageTensor], ex: FeatureExtractor, tap: str
) -> GaussianStats:
    """Fit a Gaussian over one tap's pooled descriptors across a set of images."""
    if len(images) < 2:
        raise InvalidInputError(f"need at least 2 images, got {len(images)}")
    if tap not in ex.taps:
        raise InvalidInputError(f"tap {tap!r} not configured on this extractor")
    desc = np.stack([pooled_descriptor(extract(img, ex), tap) for img in images])
    return GaussianStats(
        mean=desc.mean(axis=0), cov=np.cov(desc, rowvar=False, bias=False), count=len(images)
    )
