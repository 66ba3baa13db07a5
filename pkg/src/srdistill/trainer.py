"""The optimization loop: batch composition, mode dispatch, logging, resuming.

Every batch is half labeled pairs and half unlabeled LR patches, and its
contents are a pure function of (seed, step), which is what makes resumed
runs reproduce uninterrupted ones exactly. The unlabeled side of the loop
only ever sees LR images; recipes for held-out domains never enter here.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .degradation import Manifest
from .errors import ConfigError, DataError, InvalidInputError
from .features import FeatureExtractor, TOY_TAPS
from .imaging import ImageTensor, read_png, to_tensor
from .losses import LossReport, LossWeights, PredictionQuad, total_objective
from .models import (
    CheckpointBundle,
    DiscriminatorConfig,
    GeneratorConfig,
    ModelPair,
    PatchDiscriminator,
    build_generator,
    ema_update,
    load_checkpoint,
    predict_quad,
    save_checkpoint,
    sidecar_path,
)
from .tensorio import load_tensors, save_tensors

TRAIN_MODES = ("pdd_static", "pdd_ema", "single_fixed", "naive_distill", "supervised_only")

_PAIR_MODE = {
    "pdd_static": "static",
    "pdd_ema": "ema",
    "single_fixed": "single_fixed",
    "naive_distill": "naive_distill",
    "supervised_only": "static",
}

_DISTILL_MODES = ("pdd_static", "pdd_ema", "single_fixed")


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "toy"
    taps: tuple[str, ...] = TOY_TAPS
    seed: int = 0
    weights_path: str | None = None

    def build(self) -> FeatureExtractor:
        if self.kind == "toy":
            return FeatureExtractor.toy(taps=self.taps, seed=self.seed)
        if self.kind == "vgg19":
            return FeatureExtractor.vgg19(weights_path=self.weights_path, taps=self.taps)
        raise ConfigError(f"unknown extractor kind {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    labeled_manifest: str
    unlabeled_lr_dir: str | None = None
    val_manifest: str | None = None
    batch_size: int = 16
    lr_size: int = 48
    scale: int = 4
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    halve_at: int = 25000
    total_iters: int = 50000
    ema_decay: float = 0.999
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    init_specialist: str | None = None
    init_generalist: str | None = None
    disc_unpaired_real: bool = True
    checkpoint_every: int = 1000
    spike_skip_factor: float = 100.0
    resume_from: str | None = None

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even (half labeled, half unlabeled)")
        if not 0 <= self.halve_at < self.total_iters:
            raise ConfigError("halve_at must lie in [0, total_iters)")
        if self.mode != "supervised_only" and self.unlabeled_lr_dir is None:
            raise ConfigError(f"mode {self.mode} requires unlabeled_lr_dir")
        if self.mode in _DISTILL_MODES:
            self.weights.require_distillation_active()

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(doc: dict) -> "TrainConfig":
        doc = dict(doc)
        nested = {
            "weights": LossWeights,
            "generator": GeneratorConfig,
            "discriminator": DiscriminatorConfig,
            "extractor": ExtractorConfig,
        }
        for key, cls in nested.items():
            if key in doc and isinstance(doc[key], dict):
                doc[key] = _dataclass_from_dict(cls, doc[key], f"train.{key}")
        return _dataclass_from_dict(TrainConfig, doc, "train")


def _dataclass_from_dict(cls, doc: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name in doc:
            v = doc[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {where} section: {exc}") from exc


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Step schedule: the initial rate, halved from `halve_at` onward."""
    if step < 0:
        raise InvalidInputError("step must be >= 0")
    return cfg.lr0 if step < cfg.halve_at else cfg.lr0 / 2.0


# ---------------------------------------------------------------------------
# Data sources and batch composition
# ---------------------------------------------------------------------------


class LabeledSource:
    """In-memory (HR, LR) pairs loaded from a synthesis manifest."""

    def __init__(self, pairs: list[tuple[ImageTensor, ImageTensor]], scale: int):
        if not pairs:
            raise DataError("labeled source is empty")
        self.pairs = pairs
        self.scale = scale

    @staticmethod
    def from_manifest(path: str | Path) -> "LabeledSource":
        man = Manifest.load(path)
        pairs = [(read_png(e["hr_path"]), read_png(e["lr_path"])) for e in man.entries]
        return LabeledSource(pairs, man.scale)

    def __len__(self) -> int:
        return len(self.pairs)


class UnlabeledSource:
    """LR-only images from a directory; by contract nothing else is visible here."""

    def __init__(self, images: list[ImageTensor]):
        if not images:
            raise DataError("unlabeled source is empty")
        self.images = images

    @staticmethod
    def from_dir(path: str | Path) -> "UnlabeledSource":
        paths = sorted(Path(path).glob("*.png"))
        if not paths:
            raise DataError(f"no PNG images in {path}")
        return UnlabeledSource([read_png(p) for p in paths])

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Batch:
    x_l: torch.Tensor
    y_l: torch.Tensor
    x_u: torch.Tensor
    hr_pool: torch.Tensor
    labeled_ids: list[int]
    unlabeled_ids: list[int]


def _crop(arr: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    i = int(rng.integers(0, arr.shape[0] - size + 1))
    j = int(rng.integers(0, arr.shape[1] - size + 1))
    return arr[i : i + size, j : j + size]


def make_batch(
    labeled: LabeledSource, unlabeled: UnlabeledSource, cfg: TrainConfig, step: int
) -> Batch:
    """Compose a half labeled / half unlabeled batch, deterministic in (seed, step)."""
    rng = np.random.default_rng([cfg.seed, step])
    half = cfg.batch_size // 2
    scale, size = cfg.scale, cfg.lr_size
    xs, ys, pool, lab_ids = [], [], [], []
    for _ in range(half):
        k = int(rng.integers(0, len(labeled)))
        hr, lr = labeled.pairs[k]
        if lr.height < size or lr.width < size:
            raise DataError(f"labeled LR image {k} smaller than patch size {size}")
        i = int(rng.integers(0, lr.height - size + 1))
        j = int(rng.integers(0, lr.width - size + 1))
        xs.append(lr.data[i : i + size, j : j + size])
        ys.append(hr.data[scale * i : scale * (i + size), scale * j : scale * (j + size)])
        kp = int(rng.integers(0, len(labeled)))
        pool.append(_crop(labeled.pairs[kp][0].data, scale * size, rng))
        lab_ids.append(k)
    xu, unl_ids = [], []
    for _ in range(half):
        k = int(rng.integers(0, len(unlabeled)))
        img = unlabeled.images[k]
        if img.height < size or img.width < size:
            raise DataError(f"unlabeled image {k} smaller than patch size {size}")
        xu.append(_crop(img.data, size, rng))
        unl_ids.append(k)

    def stack(chunks):
        return torch.from_numpy(np.stack(chunks).transpose(0, 3, 1, 2)).float()

    return Batch(stack(xs), stack(ys), stack(xu), stack(pool), lab_ids, unl_ids)


# ---------------------------------------------------------------------------
# Train state and the step
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    step: int
    pair: ModelPair
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    loss_history: list[float] = field(default_factory=list)


def _build_optimizers(pair: ModelPair, cfg: TrainConfig):
    opt_g = torch.optim.Adam(
        pair.specialist.parameters(),
        lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
    )
    opt_d = torch.optim.Adam(
        pair.discriminator.parameters(),
        lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
    )
    return opt_g, opt_d


def _copy_weights(dst, src) -> None:
    dst.load_state_dict(src.state_dict())


def init_pair(cfg: TrainConfig) -> ModelPair:
    """Build the model pair for a fresh run, honoring pretrained initializers.

    Pretrained checkpoints contribute their trained specialist. In ema and
    single_fixed modes both networks start from the same weights.
    """
    specialist = build_generator(cfg.generator)
    generalist = build_generator(replace(cfg.generator, seed=cfg.generator.seed + 1))
    if cfg.init_specialist:
        _copy_weights(specialist, load_checkpoint(cfg.init_specialist, cfg.generator).pair.specialist)
    elif cfg.mode in ("pdd_ema", "single_fixed") and cfg.init_generalist:
        _copy_weights(specialist, load_checkpoint(cfg.init_generalist, cfg.generator).pair.specialist)
    if cfg.init_generalist:
        _copy_weights(generalist, load_checkpoint(cfg.init_generalist, cfg.generator).pair.specialist)
    elif cfg.mode in ("pdd_ema", "single_fixed"):
        _copy_weights(generalist, specialist)
    return ModelPair(
        specialist, generalist, PatchDiscriminator(cfg.discriminator),
        mode=_PAIR_MODE[cfg.mode], ema_decay=cfg.ema_decay,
    )


def train_step(
    state: TrainState, batch: Batch, cfg: TrainConfig, ex: FeatureExtractor
) -> tuple[TrainState, LossReport]:
    """One generator update, one discriminator update, then the EMA shadow update.

    A step whose total exceeds spike_skip_factor times the running median is
    skipped (logged, no parameter change) to protect small GAN runs.
    """
    pair = state.pair
    lr = lr_at(state.step, cfg)
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr

    pair.discriminator.eval()  # no power-iteration updates during the generator pass
    if cfg.mode == "supervised_only":
        ys_l = pair.specialist(batch.x_l)
        det = ys_l.detach()
        quad = PredictionQuad(
            ys_u=ys_l, yg_u=det, ys_l=ys_l, yg_l=det,
            x_u=batch.x_l, x_l=batch.x_l, y_l=batch.y_l,
        )
        objective_mode = "supervised_only"
    else:
        quad = predict_quad(pair, batch.x_u, batch.x_l, batch.y_l)
        objective_mode = "naive_distill" if cfg.mode == "naive_distill" else "distill"

    total, report = total_objective(
        quad, pair.discriminator, cfg.weights, ex, mode=objective_mode, step=state.step
    )
    if not torch.isfinite(total):
        raise DataError(
            f"non-finite loss at step {state.step}: {report.to_json_line()}; "
            f"labeled ids {batch.labeled_ids}, unlabeled ids {batch.unlabeled_ids}"
        )

    history = state.loss_history
    if len(history) >= 20:
        median = float(np.median(history))
        if median > 0 and float(total.detach()) > cfg.spike_skip_factor * median:
            report.skipped = True
            state.step += 1
            return state, report

    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()

    w = cfg.weights
    adv_active = w.alpha_gan > 0 or (objective_mode == "distill" and w.lambda_gan > 0)
    if adv_active:
        disc = pair.discriminator
        disc.train()
        real = torch.cat([batch.y_l, batch.hr_pool]) if cfg.disc_unpaired_real else batch.y_l
        fakes = [quad.ys_l.detach()]
        if cfg.mode != "supervised_only":
            fakes.append(quad.ys_u.detach())
        fake = torch.cat(fakes)
        d_loss = F.softplus(-disc(real)).mean() + F.softplus(disc(fake)).mean()
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        state.opt_d.step()
        disc.eval()

    if cfg.mode == "pdd_ema":
        ema_update(pair)

    history.append(float(total.detach()))
    if len(history) > 100:
        del history[0]
    state.step += 1
    return state, report


# ---------------------------------------------------------------------------
# Full-state persistence (resume support)
# ---------------------------------------------------------------------------


def _optimizer_to_numpy(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict, list]:
    tensors = {}
    sd = opt.state_dict()
    for pid, slots in sd["state"].items():
        for name, val in slots.items():
            t = val if torch.is_tensor(val) else torch.tensor(val)
            tensors[f"{prefix}.{pid}.{name}"] = t.detach().cpu().numpy().copy()
    return tensors, sd["param_groups"]


def _optimizer_from_numpy(
    opt: torch.optim.Optimizer, tensors: dict, prefix: str, groups: list
) -> None:
    state: dict[int, dict] = {}
    for key, arr in tensors.items():
        if not key.startswith(prefix + "."):
            continue
        _, pid, name = key.rsplit(".", 2)
        slot = state.setdefault(int(pid), {})
        t = torch.from_numpy(arr)
        slot[name] = t.reshape(()) if arr.shape == () else t
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_state(state: TrainState, path: str | Path, cfg: TrainConfig) -> None:
    """Checkpoint the pair plus optimizer slots and the spike-guard history."""
    path = Path(path)
    g_tensors, g_groups = _optimizer_to_numpy(state.opt_g, "opt_g")
    d_tensors, d_groups = _optimizer_to_numpy(state.opt_d, "opt_d")
    opt_path = path.with_suffix(".opt.bin")
    opt_sha = save_tensors(opt_path, {**g_tensors, **d_tensors})
    extra = {
        "opt_g_groups": g_groups,
        "opt_d_groups": d_groups,
        "opt_sha256": opt_sha,
        "loss_history": state.loss_history,
        "train_mode": cfg.mode,
    }
    save_checkpoint(state.pair, path, step=state.step, rng_state=None, extra=extra)


def load_state(path: str | Path, cfg: TrainConfig) -> TrainState:
    bundle: CheckpointBundle = load_checkpoint(path, expect_arch=cfg.generator)
    pair = bundle.pair
    opt_g, opt_d = _build_optimizers(pair, cfg)
    extra = bundle.extra or {}
    opt_path = Path(path).with_suffix(".opt.bin")
    if opt_path.exists():
        tensors = load_tensors(opt_path, expect_sha256=extra.get("opt_sha256"))
        _optimizer_from_numpy(opt_g, tensors, "opt_g", extra["opt_g_groups"])
        _optimizer_from_numpy(opt_d, tensors, "opt_d", extra["opt_d_groups"])
    return TrainState(
        step=bundle.step, pair=pair, opt_g=opt_g, opt_d=opt_d,
        loss_history=list(extra.get("loss_history", [])),
    )


# ---------------------------------------------------------------------------
# fit: the whole run
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    run_dir: Path
    final_checkpoint: Path
    log_path: Path
    eval_summary: Path | None
    completed: bool


def fit(cfg: TrainConfig, out_dir: str | Path, progress: bool = False) -> RunArtifacts:
    """Execute the full schedule, writing config, logs, checkpoints, and a summary."""
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
    status_path = run_dir / "status.json"
    status_path.write_text(json.dumps({"completed": False}))

    labeled = LabeledSource.from_manifest(cfg.labeled_manifest)
    unlabeled = (
        UnlabeledSource.from_dir(cfg.unlabeled_lr_dir)
        if cfg.unlabeled_lr_dir
        # supervised_only never reads the unlabeled half; reuse labeled LRs as filler
        else UnlabeledSource([lr for _, lr in labeled.pairs])
    )
    ex = cfg.extractor.build()

    if cfg.resume_from:
        state = load_state(cfg.resume_from, cfg)
        log_mode = "a"
    else:
        pair = init_pair(cfg)
        opt_g, opt_d = _build_optimizers(pair, cfg)
        state = TrainState(step=0, pair=pair, opt_g=opt_g, opt_d=opt_d)
        log_mode = "w"

    log_path = run_dir / "log.jsonl"
    t0 = time.time()
    with open(log_path, log_mode) as log:
        while state.step < cfg.total_iters:
            batch = make_batch(labeled, unlabeled, cfg, state.step)
            state, report = train_step(state, batch, cfg, ex)
            log.write(report.to_json_line() + "\n")
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.total_iters:
                save_state(state, run_dir / f"ckpt_{state.step}.bin", cfg)
            if progress and state.step % 100 == 0:
                rate = state.step / max(time.time() - t0, 1e-9)
                print(f"step {state.step}/{cfg.total_iters} total={report.total:.4f} "
                      f"({rate:.1f} it/s)", flush=True)

    final = run_dir / "ckpt_final.bin"
    save_state(state, final, cfg)

    eval_path = None
    if cfg.val_manifest:
        from .evalkit import evaluate

        eval_path = run_dir / "eval_summary.json"
        rep = evaluate(final, cfg.val_manifest, color_correction=True)
        eval_path.write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True))
    status_path.write_text(json.dumps({"completed": True, "steps": state.step}))
    return RunArtifacts(
        run_dir=run_dir, final_checkpoint=final, log_path=log_path,
        eval_summary=eval_path, completed=True,
    )
