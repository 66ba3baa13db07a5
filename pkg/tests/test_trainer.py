import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from srdistill import degradation as dg
from srdistill.errors import ConfigError, DataError, InvalidInputError
from srdistill.losses import LossWeights
from srdistill.models import DiscriminatorConfig, GeneratorConfig, load_checkpoint
from srdistill.toy import write_toy_corpus
from srdistill.trainer import (
    TRAIN_MODES,
    Batch,
    LabeledSource,
    TrainConfig,
    TrainState,
    UnlabeledSource,
    _build_optimizers,
    fit,
    init_pair,
    lr_at,
    make_batch,
    train_step,
)

TINY_GEN = GeneratorConfig(scale=4, channels=8, growth=4, blocks=1)
TINY_DISC = DiscriminatorConfig(base=8)


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    write_toy_corpus(root / "hr", 6, size=64, seed=0)
    dg.synthesize_dataset(root / "hr", dg.simple_config(4), root / "labeled", seed=1)
    dg.synthesize_dataset(root / "hr", dg.pseudo_real_config(4), root / "unlabeled", seed=2)
    return root


def tiny_cfg(datasets, mode="pdd_static", **kw):
    base = dict(
        mode=mode,
        labeled_manifest=str(datasets / "labeled/manifest.json"),
        unlabeled_lr_dir=str(datasets / "unlabeled/lr"),
        batch_size=2,
        lr_size=8,
        scale=4,
        total_iters=4,
        halve_at=2,
        checkpoint_every=100,
        generator=TINY_GEN,
        discriminator=TINY_DISC,
    )
    base.update(kw)
    return TrainConfig(**base)


# --- config ------------------------------------------------------------------


def test_config_validation(datasets):
    with pytest.raises(ConfigError):
        tiny_cfg(datasets, mode="finetune")
    with pytest.raises(ConfigError):
        tiny_cfg(datasets, batch_size=3)
    with pytest.raises(ConfigError):
        tiny_cfg(datasets, halve_at=10, total_iters=5)
    with pytest.raises(ConfigError):
        tiny_cfg(datasets, mode="pdd_ema", unlabeled_lr_dir=None)
    with pytest.raises(InvalidInputError):
        tiny_cfg(datasets, weights=LossWeights(lambda_intra=0, lambda_inter=0))
    # supervised runs need no unlabeled source and no active distillation weights
    tiny_cfg(datasets, mode="supervised_only", unlabeled_lr_dir=None,
             weights=LossWeights(lambda_intra=0, lambda_inter=0))


def test_mode_table_is_exhaustive():
    assert set(TRAIN_MODES) == {
        "pdd_static", "pdd_ema", "single_fixed", "naive_distill", "supervised_only"
    }


def test_config_json_round_trip_rejects_unknown_keys(datasets):
    cfg = tiny_cfg(datasets)
    doc = cfg.to_json()
    back = TrainConfig.from_json(doc)
    assert back == cfg
    doc["mystery_knob"] = 1
    with pytest.raises(ConfigError):
        TrainConfig.from_json(doc)
    doc2 = cfg.to_json()
    doc2["weights"]["alpha_omega"] = 1
    with pytest.raises(ConfigError):
        TrainConfig.from_json(doc2)


# --- schedule ------------------------------------------------------------------


def test_lr_schedule_boundaries(datasets):
    cfg = tiny_cfg(datasets, lr0=1e-4, halve_at=25, total_iters=50)
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(24, cfg) == 1e-4
    assert lr_at(25, cfg) == 5e-5
    assert lr_at(49, cfg) == 5e-5
    with pytest.raises(InvalidInputError):
        lr_at(-1, cfg)


# --- batches ---------------------------------------------------------------------


def test_batch_half_labeled_half_unlabeled(datasets):
    labeled = LabeledSource.from_manifest(datasets / "labeled/manifest.json")
    unlabeled = UnlabeledSource.from_dir(datasets / "unlabeled/lr")
    cfg = tiny_cfg(datasets, batch_size=8)
    b = make_batch(labeled, unlabeled, cfg, step=0)
    assert b.x_l.shape == (4, 3, 8, 8)
    assert b.y_l.shape == (4, 3, 32, 32)
    assert b.x_u.shape == (4, 3, 8, 8)
    assert len(b.labeled_ids) == 4 and len(b.unlabeled_ids) == 4

    minimal = make_batch(labeled, unlabeled, tiny_cfg(datasets, batch_size=2), step=0)
    assert minimal.x_l.shape[0] == 1 and minimal.x_u.shape[0] == 1


def test_batch_composition_holds_at_every_step(datasets):
    labeled = LabeledSource.from_manifest(datasets / "labeled/manifest.json")
    unlabeled = UnlabeledSource.from_dir(datasets / "unlabeled/lr")
    cfg = tiny_cfg(datasets, batch_size=4)
    for step in range(12):
        b = make_batch(labeled, unlabeled, cfg, step)
        assert b.x_l.shape[0] == b.x_u.shape[0] == cfg.batch_size // 2


def test_batch_deterministic_in_seed_and_step(datasets):
    labeled = LabeledSource.from_manifest(datasets / "labeled/manifest.json")
    unlabeled = UnlabeledSource.from_dir(datasets / "unlabeled/lr")
    cfg = tiny_cfg(datasets)
    b1 = make_batch(labeled, unlabeled, cfg, step=3)
    b2 = make_batch(labeled, unlabeled, cfg, step=3)
    assert torch.equal(b1.x_l, b2.x_l) and torch.equal(b1.x_u, b2.x_u)
    b3 = make_batch(labeled, unlabeled, cfg, step=4)
    assert not torch.equal(b1.x_l, b3.x_l)
    other_seed = make_batch(labeled, unlabeled, replace(cfg, seed=99), step=3)
    assert not torch.equal(b1.x_l, other_seed.x_l)


def test_empty_sources_error(tmp_path):
    with pytest.raises(DataError):
        UnlabeledSource.from_dir(tmp_path)
    with pytest.raises(DataError):
        LabeledSource([], scale=4)


def test_labeled_hr_crop_matches_scale_correspondence(datasets):
    labeled = LabeledSource.from_manifest(datasets / "labeled/manifest.json")
    unlabeled = UnlabeledSource.from_dir(datasets / "unlabeled/lr")
    cfg = tiny_cfg(datasets, batch_size=2)
    b = make_batch(labeled, unlabeled, cfg, step=5)
    # the HR crop of a bicubic pair downsamples back to (approximately) the LR crop
    from srdistill.imaging import ImageTensor, bicubic_downsample

    hr_patch = ImageTensor(np.clip(b.y_l[0].numpy().transpose(1, 2, 0), 0, 1).astype(np.float64))
    lr_patch = b.x_l[0].numpy().transpose(1, 2, 0)
    down = bicubic_downsample(hr_patch, 4)
    # not exact (8-bit quantization + boundary taps), but unmistakably the same crop
    assert np.abs(down.data - lr_patch).mean() < 0.02


# --- the step -----------------------------------------------------------------------


def run_steps(cfg, n, datasets):
    labeled = LabeledSource.from_manifest(cfg.labeled_manifest)
    unlabeled = UnlabeledSource.from_dir(cfg.unlabeled_lr_dir)
    ex = cfg.extractor.build()
    pair = init_pair(cfg)
    opt_g, opt_d = _build_optimizers(pair, cfg)
    state = TrainState(step=0, pair=pair, opt_g=opt_g, opt_d=opt_d)
    reports = []
    for s in range(n):
        batch = make_batch(labeled, unlabeled, cfg, state.step)
        state, rep = train_step(state, batch, cfg, ex)
        reports.append(rep)
    return state, reports


def params_vector(model):
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def test_static_generalist_bit_identical_over_steps(datasets):
    cfg = tiny_cfg(datasets, mode="pdd_static", total_iters=100, halve_at=50)
    labeled = LabeledSource.from_manifest(cfg.labeled_manifest)
    unlabeled = UnlabeledSource.from_dir(cfg.unlabeled_lr_dir)
    ex = cfg.extractor.build()
    pair = init_pair(cfg)
    frozen = params_vector(pair.generalist).clone()
    opt_g, opt_d = _build_optimizers(pair, cfg)
    state = TrainState(step=0, pair=pair, opt_g=opt_g, opt_d=opt_d)
    for s in range(25):
        batch = make_batch(labeled, unlabeled, cfg, state.step)
        state, _ = train_step(state, batch, cfg, ex)
    assert torch.equal(params_vector(pair.generalist), frozen)
    assert not torch.equal(params_vector(pair.specialist), params_vector(pair.generalist))


def test_no_gradient_ever_reaches_the_generalist(datasets):
    for mode in ("pdd_static", "pdd_ema", "single_fixed", "naive_distill"):
        cfg = tiny_cfg(datasets, mode=mode, total_iters=10, halve_at=5)
        state, _ = run_steps(cfg, 3, datasets)
        from srdistill.models import generalist_grad_magnitude

        assert generalist_grad_magnitude(state.pair) == 0.0


def test_ema_mode_moves_the_generalist(datasets):
    cfg = tiny_cfg(datasets, mode="pdd_ema", ema_decay=0.5, total_iters=10, halve_at=5)
    pair = init_pair(cfg)
    start = params_vector(pair.generalist).clone()
    labeled = LabeledSource.from_manifest(cfg.labeled_manifest)
    unlabeled = UnlabeledSource.from_dir(cfg.unlabeled_lr_dir)
    ex = cfg.extractor.build()
    opt_g, opt_d = _build_optimizers(pair, cfg)
    state = TrainState(step=0, pair=pair, opt_g=opt_g, opt_d=opt_d)
    for s in range(3):
        batch = make_batch(labeled, unlabeled, cfg, state.step)
        state, _ = train_step(state, batch, cfg, ex)
    assert not torch.equal(params_vector(pair.generalist), start)


def test_zero_weights_leave_parameters_unchanged(datasets):
    w = LossWeights(
        alpha_wavelet=0, alpha_feat=0, alpha_gan=0,
        lambda_intra=0, lambda_inter=0, lambda_gan=0, lambda_naive=0,
    )
    cfg = tiny_cfg(datasets, mode="supervised_only", weights=w, total_iters=5, halve_at=2)
    pair = init_pair(cfg)
    before_s = params_vector(pair.specialist).clone()
    before_d = params_vector(pair.discriminator).clone()
    labeled = LabeledSource.from_manifest(cfg.labeled_manifest)
    unlabeled = UnlabeledSource.from_dir(cfg.unlabeled_lr_dir)
    ex = cfg.extractor.build()
    opt_g, opt_d = _build_optimizers(pair, cfg)
    state = TrainState(step=0, pair=pair, opt_g=opt_g, opt_d=opt_d)
    for s in range(3):
        batch = make_batch(labeled, unlabeled, cfg, state.step)
        state, rep = train_step(state, batch, cfg, ex)
        assert rep.total == 0.0
    assert torch.equal(params_vector(pair.specialist), before_s)
    assert torch.equal(params_vector(pair.discriminator), before_d)


def test_shared_discriminator_is_one_object(datasets):
    # the labeled and unlabeled adversarial terms must hit the same instance
    import torch.nn as nn

    from srdistill.features import FeatureExtractor
    from srdistill.losses import LossWeights, total_objective
    from srdistill.models import predict_quad

    class Recorder(nn.Module):
        def __init__(self):
            super().__init__()
            self.seen = []

        def forward(self, x):
            self.seen.append(x)
            return torch.zeros(x.shape[0], 1, 1, 1)

    cfg = tiny_cfg(datasets, mode="pdd_ema")
    pair = init_pair(cfg)
    recorder = Recorder()
    ex = cfg.extractor.build()
    quad = predict_quad(pair, torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8),
                        torch.rand(2, 3, 32, 32))
    total_objective(quad, recorder, LossWeights(), ex, mode="distill")
    # the single recorder instance scored both the labeled and unlabeled fakes
    assert any(t is quad.ys_l for t in recorder.seen)
    assert any(t is quad.ys_u for t in recorder.seen)
    state, reports = run_steps(cfg, 2, datasets)
    assert reports[0].l_gan_lab != 0.0 and reports[0].l_gan_unlab != 0.0


def test_identical_seeds_identical_loss_streams(datasets):
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        cfg = tiny_cfg(datasets, mode="pdd_ema", total_iters=10, halve_at=5)
        _, r1 = run_steps(cfg, 6, datasets)
        _, r2 = run_steps(cfg, 6, datasets)
        for a, b in zip(r1, r2):
            assert abs(a.total - b.total) < 1e-6
    finally:
        torch.set_num_threads(threads)


def test_spike_guard_skips_outliers(datasets):
    cfg = tiny_cfg(datasets, mode="supervised_only", total_iters=50, halve_at=25,
                   spike_skip_factor=1e-6)  # absurd factor: everything is a spike
    labeled = LabeledSource.from_manifest(cfg.labeled_manifest)
    unlabeled = UnlabeledSource.from_dir(cfg.unlabeled_lr_dir)
    ex = cfg.extractor.build()
    pair = init_pair(cfg)
    opt_g, opt_d = _build_optimizers(pair, cfg)
    state = TrainState(step=0, pair=pair, opt_g=opt_g, opt_d=opt_d)
    state.loss_history.extend([1.0] * 20)  # warm history so the guard is armed
    before = params_vector(pair.specialist).clone()
    batch = make_batch(labeled, unlabeled, cfg, 0)
    state, rep = train_step(state, batch, cfg, ex)
    assert rep.skipped is True
    assert torch.equal(params_vector(pair.specialist), before)
    assert state.step == 1


# --- fit / resume --------------------------------------------------------------------


def test_fit_smoke_artifacts(datasets, tmp_path):
    cfg = tiny_cfg(datasets, mode="supervised_only", total_iters=10, halve_at=5,
                   checkpoint_every=10)
    art = fit(cfg, tmp_path / "run")
    assert art.completed
    lines = art.log_path.read_text().strip().splitlines()
    assert len(lines) == 10
    assert json.loads(lines[0])["step"] == 0
    assert (tmp_path / "run/config.json").exists()
    assert art.final_checkpoint.exists()
    assert (tmp_path / "run/ckpt_10.bin").exists()
    assert json.loads((tmp_path / "run/status.json").read_text())["completed"] is True


def test_fit_resume_reproduces_loss_trajectory(datasets, tmp_path):
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        cfg = tiny_cfg(datasets, mode="pdd_ema", total_iters=8, halve_at=4, checkpoint_every=4)
        art = fit(cfg, tmp_path / "straight")
        straight = [json.loads(l)["total"] for l in art.log_path.read_text().strip().splitlines()]

        resumed_cfg = replace(cfg, resume_from=str(tmp_path / "straight/ckpt_4.bin"))
        art2 = fit(resumed_cfg, tmp_path / "resumed")
        resumed = [json.loads(l)["total"] for l in art2.log_path.read_text().strip().splitlines()]
        assert len(resumed) == 4
        for a, b in zip(straight[4:], resumed):
            assert abs(a - b) < 1e-6
    finally:
        torch.set_num_threads(threads)


def test_init_from_pretrained_checkpoints(datasets, tmp_path):
    sup = tiny_cfg(datasets, mode="supervised_only", total_iters=3, halve_at=1)
    art = fit(sup, tmp_path / "pre")
    trained = load_checkpoint(art.final_checkpoint).pair.specialist

    ema_cfg = tiny_cfg(datasets, mode="pdd_ema", init_generalist=str(art.final_checkpoint))
    pair = init_pair(ema_cfg)
    assert torch.equal(params_vector(pair.specialist), params_vector(trained))
    assert torch.equal(params_vector(pair.generalist), params_vector(trained))

    static_cfg = tiny_cfg(
        datasets, mode="pdd_static", init_specialist=str(art.final_checkpoint)
    )
    pair2 = init_pair(static_cfg)
    assert torch.equal(params_vector(pair2.specialist), params_vector(trained))
    assert not torch.equal(params_vector(pair2.generalist), params_vector(trained))
