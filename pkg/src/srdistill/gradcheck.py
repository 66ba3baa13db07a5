"""Central finite-difference verification of every differentiable objective.

Each case wraps one loss as a scalar function of a single 8x8x3 image, runs
autograd, then probes every pixel with a central difference in double
precision. The suite passes when at least 99% of probed coordinates agree to
a relative error of 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .features import FeatureExtractor
from .losses import (
    LossWeights,
    gan_losses,
    intra_distance,
    inter_distance,
    perceptual_loss,
    r_inter,
    r_intra,
    wavelet_loss,
)
from .models import DiscriminatorConfig, PatchDiscriminator

REL_TOL = 1e-3
PASS_FRACTION = 0.99
FD_STEP = 1e-4


@dataclass
class GradCheckResult:
    name: str
    probed: int
    passed: int
    max_rel_err: float

    @property
    def ok(self) -> bool:
        return self.passed >= PASS_FRACTION * self.probed


def central_difference_check(fn, x: torch.Tensor, step: float = FD_STEP) -> tuple[int, int, float]:
    """Compare autograd gradients of fn(x) against central differences per coordinate."""
    x = x.detach().double().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach().clone()
    flat = x.detach().reshape(-1)
    probed = passed = 0
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn(x.detach()))
            flat[i] = orig - step
            lo = float(fn(x.detach()))
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            an = float(grad.reshape(-1)[i])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            probed += 1
            passed += rel <= REL_TOL
            worst = max(worst, rel)
    return probed, passed, worst


def build_suite(seed: int = 0) -> list[tuple[str, callable, torch.Tensor]]:
    """(name, scalar fn, probe tensor) triples covering every trainable objective."""
    torch.manual_seed(seed)
    ex = FeatureExtractor.toy(taps=("block2_conv2", "block3_conv2"), seed=seed).double()
    disc = PatchDiscriminator(DiscriminatorConfig(base=8, seed=seed)).double()
    disc.eval()
    w = LossWeights()

    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    x_other = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    gt = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    yg_l = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    yg_u = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    with torch.no_grad():
        d_teacher = intra_distance(ex.extract_batch(yg_l), ex.extract_batch(yg_u))

    def intra_ce(img):
        d_student = intra_distance(ex.extract_batch(x_other), ex.extract_batch(img))
        return r_intra(d_teacher, d_student, "cross_entropy")

    def intra_l1(img):
        d_student = intra_distance(ex.extract_batch(x_other), ex.extract_batch(img))
        return r_intra(d_teacher, d_student, "l1")

    with torch.no_grad():
        d_labeled = inter_distance(ex.extract_batch(x_other), ex.extract_batch(yg_l))

    def inter(img):
        d_unlabeled = inter_distance(ex.extract_batch(img), ex.extract_batch(yg_u))
        return r_inter(d_unlabeled, {t: m.detach() for t, m in d_labeled.items()})

    def wavelet(img):
        return wavelet_loss(img, gt, (1.0, 0.5, 0.5, 0.25))

    def perceptual(img):
        return perceptual_loss(img, gt, ex)

    def gan_gen(img):
        return gan_losses(disc, img, want_disc=False)["gen"]

    return [
        ("r_intra_cross_entropy", intra_ce, x),
        ("r_intra_l1", intra_l1, x),
        ("r_inter", inter, x),
        ("wavelet_loss", wavelet, x),
        ("perceptual_loss", perceptual, x),
        ("gan_generator_loss", gan_gen, x),
    ]


def run_gradcheck(seed: int = 0) -> list[GradCheckResult]:
    results = []
    for name, fn, x in build_suite(seed):
        probed, passed, worst = central_difference_check(fn, x)
        results.append(GradCheckResult(name, probed, passed, worst))
    return results


def format_table(results: list[GradCheckResult]) -> str:
    lines = [f"{'loss':<24} {'probed':>7} {'passed':>7} {'max_rel_err':>12} {'status':>7}"]
    for r in results:
        lines.append(
            f"{r.name:<24} {r.probed:>7} {r.passed:>7} {r.max_rel_err:>12.3e} "
            f"{'PASS' if r.ok else 'FAIL':>7}"
        )
    return "\n".join(lines)
