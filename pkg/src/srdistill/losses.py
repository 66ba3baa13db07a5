"""Differentiable training objectives.

The distillation couples four predictions per step: the trainable specialist
and the frozen/EMA generalist, each applied to a labeled (synthetic) and an
unlabeled input. Intra-model feature distances are matched across models with
a per-location channel cross-entropy; inter-model differences are matched
across domains through Gram statistics. Supervised terms (wavelet, feature,
adversarial) anchor the specialist to its labeled domain.

All functions are stateless: given the same tensors, weights, and frozen
extractor they return the same value, and they never mutate the
discriminator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, InvalidShapeError
from .features import FeatureExtractor, FeaturePack, gram
from .imaging import haar_dwt2d

INTRA_MEASURES = ("cross_entropy", "l1")


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights for every objective term.

    alpha_* weight the supervised composite (wavelet / feature / adversarial);
    lambda_* weight the unsupervised composite (intra / inter / adversarial);
    lambda_naive scales the labeled anchor inside the naive-distillation
    baseline. wavelet_weights are per subband (LL, LH, HL, HH). The
    intra/inter ratio is the fidelity-vs-sharpness dial.
    """

    alpha_wavelet: float = 1.0
    alpha_feat: float = 1.0
    alpha_gan: float = 0.1
    lambda_intra: float = 1.0
    lambda_inter: float = 1.0
    lambda_gan: float = 0.05
    lambda_naive: float = 1.0
    wavelet_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    intra_measure: str = "cross_entropy"
    softmax_temperature: float = 1.0

    def __post_init__(self):
        numeric = (
            self.alpha_wavelet, self.alpha_feat, self.alpha_gan,
            self.lambda_intra, self.lambda_inter, self.lambda_gan,
            self.lambda_naive, *self.wavelet_weights,
        )
        if any(v < 0 for v in numeric):
            raise InvalidInputError("loss weights must be non-negative")
        if self.intra_measure not in INTRA_MEASURES:
            raise InvalidInputError(f"intra_measure must be one of {INTRA_MEASURES}")
        if self.softmax_temperature <= 0:
            raise InvalidInputError("softmax_temperature must be positive")

    def require_distillation_active(self) -> None:
        if self.lambda_intra == 0 and self.lambda_inter == 0:
            raise InvalidInputError(
                "distillation mode needs lambda_intra > 0 or lambda_inter > 0"
            )


@dataclass
class PredictionQuad:
    """The four HR-scale predictions plus the inputs that produced them.

    Generalist outputs (yg_*) must arrive detached: the generalist never
    receives gradients, whether it is frozen or an EMA shadow.
    """

    ys_u: torch.Tensor
    yg_u: torch.Tensor
    ys_l: torch.Tensor
    yg_l: torch.Tensor
    x_u: torch.Tensor
    x_l: torch.Tensor
    y_l: torch.Tensor

    def __post_init__(self):
        if self.ys_l.shape != self.y_l.shape:
            raise InvalidShapeError(
                f"labeled prediction {tuple(self.ys_l.shape)} vs ground truth "
                f"{tuple(self.y_l.shape)}"
            )
        for name, pred, inp in (
            ("ys_u", self.ys_u, self.x_u), ("yg_u", self.yg_u, self.x_u),
            ("ys_l", self.ys_l, self.x_l), ("yg_l", self.yg_l, self.x_l),
        ):
            if pred.shape[-1] % inp.shape[-1] or pred.shape[-2] % inp.shape[-2]:
                raise InvalidShapeError(f"{name} is not an integer upscale of its input")
        if self.yg_u.requires_grad or self.yg_l.requires_grad:
            raise InvalidInputError("generalist predictions must be detached")


@dataclass
class LossReport:
    """Per-step scalar summary of every objective term."""

    step: int = 0
    r_intra: float = 0.0
    r_inter: float = 0.0
    l_wv: float = 0.0
    l_vgg: float = 0.0
    l_gan_lab: float = 0.0
    l_gan_unlab: float = 0.0
    l_l: float = 0.0
    l_u: float = 0.0
    total: float = 0.0
    l_nd: float | None = None
    skipped: bool = False

    def to_json_line(self) -> str:
        doc = asdict(self)
        # wire names for the labeled/unlabeled composites keep their case
        doc["l_L"] = doc.pop("l_l")
        doc["l_U"] = doc.pop("l_u")
        if doc["l_nd"] is None:
            del doc["l_nd"]
        return json.dumps(doc, sort_keys=True)


def _check_packs_match(a: FeaturePack, b: FeaturePack) -> None:
    if list(a.keys()) != list(b.keys()):
        raise InvalidShapeError(f"tap sets differ: {list(a)} vs {list(b)}")
    for tap in a:
        if a[tap].shape != b[tap].shape:
            raise InvalidShapeError(
                f"tap {tap}: {tuple(a[tap].shape)} vs {tuple(b[tap].shape)}"
            )


def intra_distance(f_a: FeaturePack, f_b: FeaturePack) -> dict[str, torch.Tensor]:
    """Elementwise |f_a - f_b| per tap, kept unsummed over channels."""
    _check_packs_match(f_a, f_b)
    return {tap: (f_a[tap] - f_b[tap]).abs() for tap in f_a}


def r_intra(
    d_target: dict[str, torch.Tensor],
    d_student: dict[str, torch.Tensor],
    measure: str = "cross_entropy",
    temperature: float = 1.0,
) -> torch.Tensor:
    """Consistency of intra-model distance maps.

    cross_entropy: per spatial location, the channel softmax of the target
    map scores the log-softmax of the student map; summed over locations,
    scaled by 1/(h*w) per tap, summed over taps, averaged over the batch.
    l1: mean absolute difference per tap, summed over taps. The target maps
    are treated as constants.
    """
    _check_packs_match(d_target, d_student)
    total = None
    for tap in d_target:
        dt = d_target[tap].detach()
        ds = d_student[tap]
        if dt.ndim == 3:
            dt, ds = dt.unsqueeze(0), ds.unsqueeze(0)
        if measure == "cross_entropy":
            if dt.shape[1] < 2:
                raise InvalidInputError("cross_entropy needs at least 2 channels")
            p = F.softmax(dt / temperature, dim=1)
            log_q = F.log_softmax(ds / temperature, dim=1)
            h, w = dt.shape[-2:]
            per_sample = -(p * log_q).sum(dim=1).sum(dim=(-2, -1)) / (h * w)
            term = per_sample.mean()
        elif measure == "l1":
            term = (dt - ds).abs().mean()
        else:
            raise InvalidInputError(f"unknown measure {measure!r}")
        total = term if total is None else total + term
    if total is None:
        raise InvalidInputError("empty feature packs")
    return total


def inter_distance(f_student: FeaturePack, f_teacher: FeaturePack) -> dict[str, torch.Tensor]:
    """Gram matrix of the feature difference per tap; spatial layout collapses."""
    _check_packs_match(f_student, f_teacher)
    return {tap: gram(f_student[tap] - f_teacher[tap]) for tap in f_student}


def r_inter(
    d_unlabeled: dict[str, torch.Tensor], d_labeled: dict[str, torch.Tensor]
) -> torch.Tensor:
    """Frobenius norm between the two domains' Gram statistics, summed over taps.

    Spatial sizes of the underlying images may differ; only the channel
    counts must agree. Batched inputs are averaged pairwise.
    """
    if list(d_unlabeled.keys()) != list(d_labeled.keys()):
        raise InvalidInputError(f"tap sets differ: {list(d_unlabeled)} vs {list(d_labeled)}")
    total = None
    for tap in d_unlabeled:
        gu, gl = d_unlabeled[tap], d_labeled[tap]
        if gu.shape[-1] != gl.shape[-1]:
            raise InvalidInputError(
                f"tap {tap}: channel counts differ ({gu.shape[-1]} vs {gl.shape[-1]})"
            )
        diff = gu - gl
        term = torch.linalg.matrix_norm(diff, ord="fro")
        term = term.mean() if term.ndim else term
        total = term if total is None else total + term
    if total is None:
        raise InvalidInputError("empty Gram sets")
    return total


def wavelet_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0),
) -> torch.Tensor:
    """Weighted L1 over single-level Haar subbands (LL, LH, HL, HH)."""
    if pred.shape != target.shape:
        raise InvalidShapeError(f"{tuple(pred.shape)} vs {tuple(target.shape)}")
    bands_p = haar_dwt2d(pred)
    bands_t = haar_dwt2d(target)
    total = pred.new_zeros(())
    for w, bp, bt in zip(weights, bands_p, bands_t):
        if w != 0.0:
            total = total + w * (bp - bt).abs().mean()
    return total


def perceptual_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    ex: FeatureExtractor,
    layer_weights: dict[str, float] | None = None,
) -> torch.Tensor:
    """Weighted mean absolute feature difference over the extractor's taps."""
    if pred.shape != target.shape:
        raise InvalidShapeError(f"{tuple(pred.shape)} vs {tuple(target.shape)}")
    fp = ex.extract_batch(pred)
    with torch.no_grad():
        ft = ex.extract_batch(target)
    total = pred.new_zeros(())
    for tap in ex.taps:
        w = 1.0 if layer_weights is None else layer_weights.get(tap, 0.0)
        if w != 0.0:
            total = total + w * (fp[tap] - ft[tap].detach()).abs().mean()
    return total


def gan_losses(
    disc: torch.nn.Module,
    fake: torch.Tensor,
    real: torch.Tensor | None = None,
    want_disc: bool = True,
) -> dict[str, torch.Tensor]:
    """Non-saturating logistic adversarial losses over patch logits.

    gen  = mean softplus(-D(fake)), differentiable through the fake only;
    disc = mean softplus(-D(real)) + mean softplus(D(fake)) with the fake
    treated as a constant. Requesting the disc term without a real batch is
    an error.
    """
    out = {"gen": F.softplus(-disc(fake)).mean()}
    if want_disc:
        if real is None:
            raise InvalidInputError("discriminator loss requested but no real batch given")
        out["disc"] = F.softplus(-disc(real)).mean() + F.softplus(disc(fake.detach())).mean()
    return out


def supervised_terms(
    pred: torch.Tensor,
    target: torch.Tensor,
    disc: torch.nn.Module,
    w: LossWeights,
    ex: FeatureExtractor,
) -> dict[str, torch.Tensor]:
    return {
        "l_wv": wavelet_loss(pred, target, w.wavelet_weights),
        "l_vgg": perceptual_loss(pred, target, ex),
        "l_gan": gan_losses(disc, pred, want_disc=False)["gen"],
    }


def supervised_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    disc: torch.nn.Module,
    w: LossWeights,
    ex: FeatureExtractor,
) -> torch.Tensor:
    """Labeled composite: wavelet + feature + adversarial, alpha-weighted."""
    t = supervised_terms(pred, target, disc, w, ex)
    return w.alpha_wavelet * t["l_wv"] + w.alpha_feat * t["l_vgg"] + w.alpha_gan * t["l_gan"]


def unsupervised_terms(
    quad: PredictionQuad,
    disc: torch.nn.Module,
    w: LossWeights,
    ex: FeatureExtractor,
) -> dict[str, torch.Tensor]:
    fs_l = ex.extract_batch(quad.ys_l)
    fs_u = ex.extract_batch(quad.ys_u)
    with torch.no_grad():
        fg_l = ex.extract_batch(quad.yg_l)
        fg_u = ex.extract_batch(quad.yg_u)
    d_teacher = intra_distance(fg_l, fg_u)
    d_student = intra_distance(fs_l, fs_u)
    return {
        "r_intra": r_intra(d_teacher, d_student, w.intra_measure, w.softmax_temperature),
        "r_inter": r_inter(inter_distance(fs_u, fg_u), inter_distance(fs_l, fg_l)),
        "l_gan": gan_losses(disc, quad.ys_u, want_disc=False)["gen"],
    }


def unsupervised_loss(
    quad: PredictionQuad,
    disc: torch.nn.Module,
    w: LossWeights,
    ex: FeatureExtractor,
) -> torch.Tensor:
    """Unlabeled composite: intra + inter consistency plus the adversarial term.

    Gradients reach only the specialist branches (ys_u, ys_l); the generalist
    predictions are constants by the PredictionQuad contract.
    """
    t = unsupervised_terms(quad, disc, w, ex)
    return w.lambda_intra * t["r_intra"] + w.lambda_inter * t["r_inter"] + w.lambda_gan * t["l_gan"]


def naive_distill_loss(
    quad: PredictionQuad,
    disc: torch.nn.Module,
    w: LossWeights,
    ex: FeatureExtractor,
) -> torch.Tensor:
    """Baseline: regress onto the generalist's unlabeled prediction as pseudo truth,
    anchored by the supervised composite on the labeled pair."""
    distill = supervised_loss(quad.ys_u, quad.yg_u.detach(), disc, w, ex)
    anchor = supervised_loss(quad.ys_l, quad.y_l, disc, w, ex)
    return distill + w.lambda_naive * anchor


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


def total_objective(
    quad: PredictionQuad,
    disc: torch.nn.Module,
    w: LossWeights,
    ex: FeatureExtractor,
    mode: str,
    step: int = 0,
) -> tuple[torch.Tensor, LossReport]:
    """Single-pass evaluation of the full generator objective for one mode.

    Distillation modes combine the labeled and unlabeled composites
    (total = l_l + l_u); supervised_only drops the unlabeled side;
    naive_distill uses the imitation baseline.
    """
    report = LossReport(step=step)
    if mode == "naive_distill":
        sup_u = supervised_terms(quad.ys_u, quad.yg_u.detach(), disc, w, ex)
        sup_l = supervised_terms(quad.ys_l, quad.y_l, disc, w, ex)
        distill = (
            w.alpha_wavelet * sup_u["l_wv"] + w.alpha_feat * sup_u["l_vgg"]
            + w.alpha_gan * sup_u["l_gan"]
        )
        anchor = (
            w.alpha_wavelet * sup_l["l_wv"] + w.alpha_feat * sup_l["l_vgg"]
            + w.alpha_gan * sup_l["l_gan"]
        )
        total = distill + w.lambda_naive * anchor
        report.l_wv = _f(sup_l["l_wv"])
        report.l_vgg = _f(sup_l["l_vgg"])
        report.l_gan_lab = _f(sup_l["l_gan"])
        report.l_gan_unlab = _f(sup_u["l_gan"])
        report.l_nd = _f(total)
        report.total = _f(total)
        return total, report

    sup = supervised_terms(quad.ys_l, quad.y_l, disc, w, ex)
    l_l = w.alpha_wavelet * sup["l_wv"] + w.alpha_feat * sup["l_vgg"] + w.alpha_gan * sup["l_gan"]
    report.l_wv = _f(sup["l_wv"])
    report.l_vgg = _f(sup["l_vgg"])
    report.l_gan_lab = _f(sup["l_gan"])

    if mode == "supervised_only":
        report.l_l = _f(l_l)
        report.total = _f(l_l)
        return l_l, report

    uns = unsupervised_terms(quad, disc, w, ex)
    l_u = (
        w.lambda_intra * uns["r_intra"]
        + w.lambda_inter * uns["r_inter"]
        + w.lambda_gan * uns["l_gan"]
    )
    total = l_l + l_u
    report.r_intra = _f(uns["r_intra"])
    report.r_inter = _f(uns["r_inter"])
    report.l_gan_unlab = _f(uns["l_gan"])
    report.l_l = _f(l_l)
    report.l_u = _f(l_u)
    report.total = report.l_l + report.l_u  # exact composition at report level
    return total, report
