"""Output rectification, Y-channel metrics, and feature-distribution analysis.

PSNR and SSIM run on the BT.601 luma plane of [0, 1] images. The domain-gap
analysis fits Gaussians over pooled low-level feature descriptors of two
prediction sets and reports their KL divergence plus a 2-D PCA projection
(labeled as such; it substitutes for fancier embeddings).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

from .degradation import Manifest
from .errors import InvalidInputError, InvalidShapeError
from .features import FeatureExtractor, GaussianStats, extract, fit_feature_gaussian, pooled_descriptor
from .imaging import ImageTensor, from_tensor, read_png, to_tensor, y_channel
from .models import load_checkpoint

PSNR_CAP_DB = 99.0


def color_correct(sr: ImageTensor, lr: ImageTensor) -> ImageTensor:
    """Remap each SR channel so its mean/std match the LR input's channel stats.

    A zero-variance SR channel collapses to the LR channel mean (the scale
    term is suppressed). The result is clipped to [0, 1].
    """
    if sr.colorspace != "rgb" or lr.colorspace != "rgb":
        raise InvalidInputError("color_correct expects RGB images")
    out = np.empty_like(sr.data)
    for c in range(sr.channels):
        s = sr.data[..., c]
        mu_s, sd_s = s.mean(), s.std()
        mu_l, sd_l = lr.data[..., c].mean(), lr.data[..., c].std()
        if sd_s < 1e-8:
            out[..., c] = mu_l
        else:
            out[..., c] = (s - mu_s) * (sd_l / sd_s) + mu_l
    return ImageTensor(np.clip(out, 0.0, 1.0), colorspace="rgb", meta=sr.meta)


def psnr_y(a: ImageTensor, b: ImageTensor) -> float:
    """10*log10(1/MSE) on the luma plane, capped at 99 dB for (near-)identical pairs."""
    if a.data.shape != b.data.shape:
        raise InvalidShapeError(f"{a.data.shape} vs {b.data.shape}")
    mse = float(np.mean((y_channel(a) - y_channel(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_y(a: ImageTensor, b: ImageTensor, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM on the luma plane: 11x11 Gaussian window, sigma 1.5."""
    if a.data.shape != b.data.shape:
        raise InvalidShapeError(f"{a.data.shape} vs {b.data.shape}")
    x, y = y_channel(a), y_channel(b)
    if min(x.shape) < 11:
        raise InvalidShapeError(f"image {x.shape} smaller than the 11x11 SSIM window")
    win = _gaussian_window()
    c1, c2 = k1**2, k2**2

    def f(img):
        return convolve2d(img, win, mode="valid")

    mu_x, mu_y = f(x), f(y)
    var_x = f(x * x) - mu_x**2
    var_y = f(y * y) - mu_y**2
    cov = f(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def sharpness_proxy(img: ImageTensor) -> float:
    """Mean luma gradient magnitude; a cheap stand-in for perceived sharpness."""
    y = y_channel(img)
    gx = np.diff(y, axis=1)
    gy = np.diff(y, axis=0)
    return float((np.abs(gx).mean() + np.abs(gy).mean()) / 2.0)


def kl_gaussian(p: GaussianStats, q: GaussianStats) -> float:
    """Closed-form KL(P || Q) between two multivariate Gaussians.

    Both inputs must already be positive definite (regularize when fitting
    from data).
    """
    if p.dim != q.dim:
        raise InvalidInputError(f"dimension mismatch: {p.dim} vs {q.dim}")
    d = p.dim
    try:
        chol_q = np.linalg.cholesky(q.cov)
    except np.linalg.LinAlgError as exc:
        raise InvalidInputError("Q covariance is not positive definite") from exc
    solve = np.linalg.solve
    trace = float(np.trace(solve(q.cov, p.cov)))
    diff = q.mean - p.mean
    quad = float(diff @ solve(q.cov, diff))
    sign_p, logdet_p = np.linalg.slogdet(p.cov)
    if sign_p <= 0:
        raise InvalidInputError("P covariance is not positive definite")
    logdet_q = 2.0 * float(np.log(np.diag(chol_q)).sum())
    return 0.5 * (trace + quad - d + logdet_q - logdet_p)


# ---------------------------------------------------------------------------
# Domain-gap analysis
# ---------------------------------------------------------------------------


def domain_gap_analysis(
    labeled_preds: list[ImageTensor],
    unlabeled_preds: list[ImageTensor],
    ex: FeatureExtractor,
    tap: str | None = None,
) -> dict:
    """Gaussian KL between two prediction sets' low-level descriptors plus 2-D PCA.

    Returns {"kl": float, "labeled_xy": (n,2), "unlabeled_xy": (m,2)}; the
    projection is for plotting and carries no metric claims.
    """
    if len(labeled_preds) < 8 or len(unlabeled_preds) < 8:
        raise InvalidInputError("need at least 8 images per set")
    tap = tap or ex.taps[0]
    p = fit_feature_gaussian(labeled_preds, ex, tap).regularized()
    q = fit_feature_gaussian(unlabeled_preds, ex, tap).regularized()
    kl = kl_gaussian(p, q)

    desc_l = np.stack([pooled_descriptor(extract(im, ex), tap) for im in labeled_preds])
    desc_u = np.stack([pooled_descriptor(extract(im, ex), tap) for im in unlabeled_preds])
    both = np.concatenate([desc_l, desc_u])
    centered = both - both.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    return {
        "kl": float(kl),
        "labeled_xy": proj[: len(desc_l)],
        "unlabeled_xy": proj[len(desc_l) :],
    }


# ---------------------------------------------------------------------------
# Checkpoint evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    dataset_id: str
    checkpoint_id: str
    color_correction: bool
    per_image: list[dict] = field(default_factory=list)
    psnr_y: float = 0.0
    ssim_y: float = 0.0

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "checkpoint_id": self.checkpoint_id,
            "color_correction": self.color_correction,
            "per_image": self.per_image,
            "aggregates": {"psnr_y": self.psnr_y, "ssim_y": self.ssim_y},
        }


def upscale_image(model: torch.nn.Module, lr: ImageTensor) -> ImageTensor:
    """Run one LR image through a generator in eval mode; output clamped to [0, 1]."""
    with torch.no_grad():
        out = model(to_tensor(lr).unsqueeze(0))[0]
    return from_tensor(out, colorspace="rgb", meta=lr.meta)


def predictions_for_manifest(
    model: torch.nn.Module, manifest: Manifest, color_correction: bool = False
) -> list[tuple[ImageTensor, ImageTensor]]:
    """(prediction, ground truth) per manifest entry, in manifest order."""
    out = []
    for entry in manifest.entries:
        lr = read_png(entry["lr_path"])
        hr = read_png(entry["hr_path"])
        sr = upscale_image(model, lr)
        if color_correction:
            sr = color_correct(sr, lr)
        out.append((sr, hr))
    return out


def evaluate(
    model_ckpt: str | Path, dataset_manifest: str | Path, color_correction: bool = False
) -> EvalReport:
    """Deterministic per-image and aggregate PSNR/SSIM of a checkpointed specialist."""
    manifest = Manifest.load(dataset_manifest)
    bundle = load_checkpoint(model_ckpt)
    model = bundle.pair.specialist
    model.eval()
    report = EvalReport(
        dataset_id=str(dataset_manifest),
        checkpoint_id=str(model_ckpt),
        color_correction=bool(color_correction),
    )
    for idx, (sr, hr) in enumerate(
        predictions_for_manifest(model, manifest, color_correction)
    ):
        report.per_image.append(
            {
                "index": idx,
                "lr_path": manifest.entries[idx]["lr_path"],
                "psnr_y": psnr_y(sr, hr),
                "ssim_y": ssim_y(sr, hr),
                "sharpness": sharpness_proxy(sr),
            }
        )
    report.psnr_y = float(np.mean([r["psnr_y"] for r in report.per_image]))
    report.ssim_y = float(np.mean([r["ssim_y"] for r in report.per_image]))
    return report


def merge_external_metrics(report: EvalReport, csv_path: str | Path) -> EvalReport:
    """Attach plug-in metric columns from a CSV of image_id, metric_name, value rows."""
    for line in Path(csv_path).read_text().strip().splitlines():
        parts = [p.strip() for p in line.split(",")]
        if parts[0] == "image_id":
            continue
        if len(parts) != 3:
            raise InvalidInputError(f"bad metric row: {line!r}")
        idx, name, value = int(parts[0]), parts[1], float(parts[2])
        if not 0 <= idx < len(report.per_image):
            raise InvalidInputError(f"metric row for unknown image {idx}")
        report.per_image[idx][name] = value
    return report
