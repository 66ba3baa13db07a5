import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from srdistill.errors import InvalidInputError, InvalidShapeError
from srdistill.features import FeatureExtractor, gram
from srdistill.gradcheck import run_gradcheck
from srdistill.losses import (
    LossReport,
    LossWeights,
    PredictionQuad,
    gan_losses,
    inter_distance,
    intra_distance,
    naive_distill_loss,
    perceptual_loss,
    r_inter,
    r_intra,
    supervised_loss,
    supervised_terms,
    total_objective,
    unsupervised_loss,
    unsupervised_terms,
    wavelet_loss,
)
from srdistill.models import DiscriminatorConfig, PatchDiscriminator

GEN = torch.Generator().manual_seed(99)

# brute-force value of the two-channel cross-entropy case dG=(1,0), dS=(0,1):
# softmax([1,0]) scored against log softmax([0,1]) with natural logs
CE_TWO_CHANNEL = 1.0443202661482278


def rand_pack(taps=("a", "b"), c=4, h=5, w=5, batch=1):
    return {t: torch.rand(batch, c, h, w, generator=GEN) for t in taps}


def zero_logit_disc():
    class Zero(torch.nn.Module):
        def forward(self, x):
            return torch.zeros(x.shape[0], 1, 4, 4)

    return Zero()


# --- weights ------------------------------------------------------------------


def test_weights_validation():
    with pytest.raises(InvalidInputError):
        LossWeights(alpha_gan=-0.1)
    with pytest.raises(InvalidInputError):
        LossWeights(intra_measure="huber")
    with pytest.raises(InvalidInputError):
        LossWeights(softmax_temperature=0.0)
    with pytest.raises(InvalidInputError):
        LossWeights(lambda_intra=0.0, lambda_inter=0.0).require_distillation_active()
    LossWeights(lambda_intra=0.0, lambda_inter=0.5).require_distillation_active()


# --- intra distance -------------------------------------------------------------


def test_intra_distance_zero_and_scalar_cases():
    pack = rand_pack()
    d = intra_distance(pack, pack)
    assert all(torch.all(v == 0) for v in d.values())
    a = {"t": torch.full((1, 1, 1, 1), 3.0)}
    b = {"t": torch.full((1, 1, 1, 1), 1.0)}
    assert float(intra_distance(a, b)["t"]) == 2.0


def test_intra_distance_matches_elementwise_oracle():
    fa, fb = rand_pack(), rand_pack()
    d = intra_distance(fa, fb)
    for tap in fa:
        want = np.abs(fa[tap].numpy() - fb[tap].numpy())
        assert np.abs(d[tap].numpy() - want).max() < 1e-7


def test_intra_distance_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        intra_distance(rand_pack(c=4), rand_pack(c=5))


# --- r_intra ----------------------------------------------------------------------


def test_r_intra_constant_channels_equals_log_c():
    d = {"t": torch.full((1, 4, 3, 3), 0.7)}
    assert abs(float(r_intra(d, d)) - math.log(4)) < 1e-5


def test_r_intra_shift_invariance():
    dg, ds = rand_pack(taps=("t",)), rand_pack(taps=("t",))
    shift_g = torch.rand(1, 1, 5, 5, generator=GEN)
    shift_s = torch.rand(1, 1, 5, 5, generator=GEN)
    base = float(r_intra(dg, ds))
    assert abs(float(r_intra({"t": dg["t"] + shift_g}, ds)) - base) < 1e-6
    assert abs(float(r_intra(dg, {"t": ds["t"] + shift_s})) - base) < 1e-6


def test_r_intra_two_channel_brute_force_value():
    dg = {"t": torch.tensor([1.0, 0.0]).view(1, 2, 1, 1)}
    ds = {"t": torch.tensor([0.0, 1.0]).view(1, 2, 1, 1)}
    assert abs(float(r_intra(dg, ds)) - CE_TWO_CHANNEL) < 1e-6


def test_r_intra_cross_entropy_lower_bound():
    for _ in range(500):
        dg, ds = rand_pack(taps=("t",), h=2, w=2), rand_pack(taps=("t",), h=2, w=2)
        ce = float(r_intra(dg, ds))
        entropy = float(r_intra(dg, dg))
        assert ce >= entropy - 1e-6


def test_r_intra_l1_measure():
    dg, ds = rand_pack(), rand_pack()
    want = sum(float((dg[t] - ds[t]).abs().mean()) for t in dg)
    assert abs(float(r_intra(dg, ds, measure="l1")) - want) < 1e-6


def test_r_intra_single_channel_ce_degenerate():
    d = rand_pack(c=1)
    with pytest.raises(InvalidInputError):
        r_intra(d, d, measure="cross_entropy")
    r_intra(d, d, measure="l1")  # fine for the l1 variant


def test_r_intra_sums_over_taps():
    dg, ds = rand_pack(taps=("a", "b")), rand_pack(taps=("a", "b"))
    both = float(r_intra(dg, ds))
    single = sum(float(r_intra({t: dg[t]}, {t: ds[t]})) for t in ("a", "b"))
    assert abs(both - single) < 1e-6


# --- inter distance / r_inter --------------------------------------------------------


def test_inter_distance_zero_when_equal():
    pack = rand_pack()
    d = inter_distance(pack, pack)
    assert all(torch.all(v == 0) for v in d.values())


def test_inter_distance_composes_gram_of_difference():
    fs, fg = rand_pack(taps=("t",)), rand_pack(taps=("t",))
    got = inter_distance(fs, fg)["t"]
    want = gram(fs["t"] - fg["t"])
    assert torch.allclose(got, want)
    sym = got[0] if got.ndim == 3 else got
    assert torch.equal(sym, sym.T)
    assert torch.linalg.eigvalsh(sym.double()).min() >= -1e-8


def test_r_inter_toy_frobenius_value():
    du = {"t": torch.diag(torch.tensor([3.0, 4.0]))}
    dl = {"t": torch.zeros(2, 2)}
    assert abs(float(r_inter(du, dl)) - 5.0) < 1e-7


def test_r_inter_symmetry_and_zero_iff_equal():
    du = {"t": gram(torch.rand(3, 4, 4, generator=GEN))}
    dl = {"t": gram(torch.rand(3, 4, 4, generator=GEN))}
    assert float(r_inter(du, dl)) == pytest.approx(float(r_inter(dl, du)), abs=1e-7)
    assert float(r_inter(du, du)) == 0.0
    assert float(r_inter(du, dl)) > 1e-8  # differs, so strictly positive


def test_r_inter_accepts_different_spatial_sizes():
    fs1 = {"t": torch.rand(1, 3, 6, 6, generator=GEN)}
    fg1 = {"t": torch.rand(1, 3, 6, 6, generator=GEN)}
    fs2 = {"t": torch.rand(1, 3, 10, 10, generator=GEN)}
    fg2 = {"t": torch.rand(1, 3, 10, 10, generator=GEN)}
    val = r_inter(inter_distance(fs1, fg1), inter_distance(fs2, fg2))
    assert torch.isfinite(val)
    with pytest.raises(InvalidInputError):
        r_inter({"t": torch.zeros(3, 3)}, {"t": torch.zeros(4, 4)})


# --- wavelet loss --------------------------------------------------------------------


def test_wavelet_loss_zero_cases():
    x = torch.rand(1, 3, 8, 8, generator=GEN)
    assert float(wavelet_loss(x, x)) == 0.0
    y = torch.rand(1, 3, 8, 8, generator=GEN)
    assert float(wavelet_loss(x, y, (0, 0, 0, 0))) == 0.0


def test_wavelet_loss_constant_shift_ll_only():
    # brute force on 2x2 blocks: LL of constant c is 2c, so |LL(c) - LL(c+d)| = 2d
    delta = 0.125
    p = torch.full((1, 3, 6, 6), 0.25)
    q = torch.full((1, 3, 6, 6), 0.25 + delta)
    got = float(wavelet_loss(p, q, (1.0, 0.0, 0.0, 0.0)))
    assert abs(got - 2 * delta) < 1e-6


def test_wavelet_loss_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        wavelet_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 6, 6))


# --- perceptual loss ------------------------------------------------------------------


def test_perceptual_loss_zero_and_single_tap():
    ex = FeatureExtractor.toy(taps=("block2_conv2", "block3_conv2"), seed=0)
    x = torch.rand(1, 3, 16, 16, generator=GEN)
    assert float(perceptual_loss(x, x, ex)) == 0.0
    y = torch.rand(1, 3, 16, 16, generator=GEN)
    only_b2 = perceptual_loss(x, y, ex, {"block2_conv2": 1.0, "block3_conv2": 0.0})
    fx, fy = ex.extract_batch(x), ex.extract_batch(y)
    want = float((fx["block2_conv2"] - fy["block2_conv2"]).abs().mean())
    assert float(only_b2) == pytest.approx(want, abs=1e-7)


def test_perceptual_loss_monotone_in_noise():
    ex = FeatureExtractor.toy(seed=0)
    gt = torch.rand(1, 3, 32, 32, generator=GEN)
    vals = []
    for sigma in (0.02, 0.08, 0.2):
        noisy = (gt + sigma * torch.randn(gt.shape, generator=GEN)).clamp(0, 1)
        vals.append(float(perceptual_loss(noisy, gt, ex)))
    assert vals[0] < vals[1] < vals[2]


# --- gan losses -----------------------------------------------------------------------


def test_gan_zero_logit_gives_log2():
    d = zero_logit_disc()
    fake = torch.rand(2, 3, 8, 8, generator=GEN)
    out = gan_losses(d, fake, real=fake)
    assert abs(float(out["gen"]) - math.log(2)) < 1e-6
    assert abs(float(out["disc"]) - 2 * math.log(2)) < 1e-6


def test_gan_saturation_limits():
    class Const(torch.nn.Module):
        def __init__(self, v):
            super().__init__()
            self.v = v

        def forward(self, x):
            return torch.full((x.shape[0], 1, 2, 2), self.v)

    fake = torch.rand(1, 3, 8, 8)
    # perfect discriminator: real -> +inf, fake -> -inf collapses the loss to zero
    strong = float(
        F.softplus(-Const(30.0)(fake)).mean() + F.softplus(Const(-30.0)(fake)).mean()
    )
    assert strong < 1e-8
    # evaluated with hand softplus at logits (real=1, fake=-1)
    finite = float(F.softplus(-Const(1.0)(fake)).mean() + F.softplus(Const(-1.0)(fake)).mean())
    assert abs(finite - 0.6265233750364457) < 1e-6


def test_gan_requires_real_for_disc_term():
    with pytest.raises(InvalidInputError):
        gan_losses(zero_logit_disc(), torch.rand(1, 3, 8, 8))
    out = gan_losses(zero_logit_disc(), torch.rand(1, 3, 8, 8), want_disc=False)
    assert set(out) == {"gen"}


def test_gan_generator_gradient_flows_only_through_fake():
    disc = PatchDiscriminator(DiscriminatorConfig(base=8, seed=0))
    fake = torch.rand(1, 3, 16, 16, generator=GEN, requires_grad=True)
    real = torch.rand(1, 3, 16, 16, generator=GEN, requires_grad=True)
    out = gan_losses(disc, fake, real)
    out["gen"].backward(retain_graph=True)
    assert fake.grad is not None and fake.grad.abs().sum() > 0
    assert real.grad is None
    fake_gen_grad = fake.grad.clone()
    fake.grad = None
    out["disc"].backward()
    assert fake.grad is None  # disc term treats the fake as constant
    assert real.grad is not None
    assert torch.all(fake_gen_grad == fake_gen_grad)  # finite


# --- composites -----------------------------------------------------------------------


def make_quad(ex, size=16, scale=2, equal=False):
    x_u = torch.rand(2, 3, size // scale, size // scale, generator=GEN)
    x_l = torch.rand(2, 3, size // scale, size // scale, generator=GEN)
    y_l = torch.rand(2, 3, size, size, generator=GEN)
    ys_u = torch.rand(2, 3, size, size, generator=GEN)
    ys_l = torch.rand(2, 3, size, size, generator=GEN)
    yg_u = ys_u.detach().clone() if equal else torch.rand(2, 3, size, size, generator=GEN)
    yg_l = ys_l.detach().clone() if equal else torch.rand(2, 3, size, size, generator=GEN)
    return PredictionQuad(ys_u=ys_u, yg_u=yg_u, ys_l=ys_l, yg_l=yg_l, x_u=x_u, x_l=x_l, y_l=y_l)


def test_quad_validation():
    with pytest.raises(InvalidShapeError):
        PredictionQuad(
            ys_u=torch.rand(1, 3, 8, 8), yg_u=torch.rand(1, 3, 8, 8),
            ys_l=torch.rand(1, 3, 8, 8), yg_l=torch.rand(1, 3, 8, 8),
            x_u=torch.rand(1, 3, 4, 4), x_l=torch.rand(1, 3, 4, 4),
            y_l=torch.rand(1, 3, 6, 6),
        )
    with pytest.raises(InvalidInputError):
        PredictionQuad(
            ys_u=torch.rand(1, 3, 8, 8), yg_u=torch.rand(1, 3, 8, 8, requires_grad=True),
            ys_l=torch.rand(1, 3, 8, 8), yg_l=torch.rand(1, 3, 8, 8),
            x_u=torch.rand(1, 3, 4, 4), x_l=torch.rand(1, 3, 4, 4),
            y_l=torch.rand(1, 3, 8, 8),
        )


def test_supervised_loss_compositions():
    ex = FeatureExtractor.toy(taps=("block2_conv2",), seed=0)
    disc = zero_logit_disc()
    pred = torch.rand(1, 3, 16, 16, generator=GEN)
    gt = torch.rand(1, 3, 16, 16, generator=GEN)
    zero_w = LossWeights(alpha_wavelet=0, alpha_feat=0, alpha_gan=0)
    assert float(supervised_loss(pred, gt, disc, zero_w, ex)) == 0.0

    wv_only = LossWeights(alpha_wavelet=0.7, alpha_feat=0, alpha_gan=0)
    assert float(supervised_loss(pred, gt, disc, wv_only, ex)) == pytest.approx(
        0.7 * float(wavelet_loss(pred, gt, wv_only.wavelet_weights)), abs=1e-7
    )

    w = LossWeights(alpha_wavelet=0.5, alpha_feat=1.5, alpha_gan=0.2)
    want = (
        0.5 * float(wavelet_loss(pred, gt, w.wavelet_weights))
        + 1.5 * float(perceptual_loss(pred, gt, ex))
        + 0.2 * float(gan_losses(disc, pred, want_disc=False)["gen"])
    )
    assert float(supervised_loss(pred, gt, disc, w, ex)) == pytest.approx(want, abs=1e-6)


def test_unsupervised_loss_compositions():
    ex = FeatureExtractor.toy(taps=("block2_conv2",), seed=0)
    disc = zero_logit_disc()
    quad = make_quad(ex)
    zero_w = LossWeights(lambda_intra=0, lambda_inter=0, lambda_gan=0)
    assert float(unsupervised_loss(quad, disc, zero_w, ex)) == 0.0

    w = LossWeights(lambda_intra=0.9, lambda_inter=0.3, lambda_gan=0.1)
    terms = unsupervised_terms(quad, disc, w, ex)
    want = 0.9 * float(terms["r_intra"]) + 0.3 * float(terms["r_inter"]) + 0.1 * float(terms["l_gan"])
    assert float(unsupervised_loss(quad, disc, w, ex)) == pytest.approx(want, abs=1e-6)


def test_unsupervised_degenerate_when_specialist_equals_generalist():
    ex = FeatureExtractor.toy(taps=("block2_conv2",), seed=0)
    disc = zero_logit_disc()
    quad = make_quad(ex, equal=True)
    w = LossWeights()
    terms = unsupervised_terms(quad, disc, w, ex)
    assert float(terms["r_inter"]) == 0.0
    # cross-entropy sits exactly at its entropy lower bound
    fs_l = ex.extract_batch(quad.ys_l)
    fs_u = ex.extract_batch(quad.ys_u)
    d = intra_distance(fs_l, fs_u)
    assert float(terms["r_intra"]) == pytest.approx(float(r_intra(d, d)), abs=1e-6)


def test_naive_distill_compositions():
    ex = FeatureExtractor.toy(taps=("block2_conv2",), seed=0)
    disc = zero_logit_disc()
    quad = make_quad(ex)
    w0 = LossWeights(lambda_naive=0.0)
    want = float(supervised_loss(quad.ys_u, quad.yg_u, disc, w0, ex))
    assert float(naive_distill_loss(quad, disc, w0, ex)) == pytest.approx(want, abs=1e-6)

    w = LossWeights(lambda_naive=0.5)
    want = float(supervised_loss(quad.ys_u, quad.yg_u, disc, w, ex)) + 0.5 * float(
        supervised_loss(quad.ys_l, quad.y_l, disc, w, ex)
    )
    assert float(naive_distill_loss(quad, disc, w, ex)) == pytest.approx(want, abs=1e-6)

    # perfect predictions with the adversarial term disabled
    perfect = make_quad(ex, equal=True)
    perfect = PredictionQuad(
        ys_u=perfect.ys_u, yg_u=perfect.ys_u.detach(), ys_l=perfect.ys_l,
        yg_l=perfect.ys_l.detach(), x_u=perfect.x_u, x_l=perfect.x_l,
        y_l=perfect.ys_l.detach(),
    )
    w_nogan = LossWeights(alpha_gan=0.0)
    assert float(naive_distill_loss(perfect, disc, w_nogan, ex)) == 0.0


def test_total_objective_report_composition():
    ex = FeatureExtractor.toy(taps=("block2_conv2",), seed=0)
    disc = zero_logit_disc()
    quad = make_quad(ex)
    w = LossWeights()
    total, report = total_objective(quad, disc, w, ex, mode="distill", step=7)
    assert report.step == 7
    assert report.total == report.l_l + report.l_u  # exact, not approximate
    assert float(total) == pytest.approx(report.total, abs=1e-6)
    line = report.to_json_line()
    assert '"l_nd"' not in line
    doc = __import__("json").loads(line)
    assert set(doc) == {
        "step", "r_intra", "r_inter", "l_wv", "l_vgg",
        "l_gan_lab", "l_gan_unlab", "l_L", "l_U", "total", "skipped",
    }

    _, nd_report = total_objective(quad, disc, w, ex, mode="naive_distill")
    assert nd_report.l_nd is not None and nd_report.total == nd_report.l_nd

    _, sup_report = total_objective(quad, disc, w, ex, mode="supervised_only")
    assert sup_report.l_u == 0.0 and sup_report.total == sup_report.l_l


def test_all_losses_finite_on_fuzzed_inputs():
    ex = FeatureExtractor.toy(taps=("block2_conv2",), seed=0)
    disc = PatchDiscriminator(DiscriminatorConfig(base=8, seed=0))
    w = LossWeights()
    for trial in range(10):
        quad = make_quad(ex)
        for mode in ("distill", "naive_distill", "supervised_only"):
            total, report = total_objective(quad, disc, w, ex, mode=mode)
            assert torch.isfinite(total)
            assert all(
                np.isfinite(v) for v in (report.r_intra, report.r_inter, report.l_wv,
                                         report.l_vgg, report.total)
            )


# --- gradient checks -------------------------------------------------------------------


def test_gradient_suite_passes():
    results = run_gradcheck(seed=0)
    assert {r.name for r in results} == {
        "r_intra_cross_entropy", "r_intra_l1", "r_inter",
        "wavelet_loss", "perceptual_loss", "gan_generator_loss",
    }
    for r in results:
        assert r.ok, f"{r.name}: {r.passed}/{r.probed}, worst {r.max_rel_err:.2e}"
