"""Synthetic degradation pipelines: sampling, application, and dataset synthesis.

A recipe is an ordered list of fully-resolved stages followed by a bicubic
resize down to 1/scale of the source. Everything is deterministic: stage
randomness (noise) is driven by seeds resolved at sampling time, so applying
a serialized recipe reproduces the original LR image bit for bit.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import convolve

from .errors import ConfigError, DataError, InvalidInputError, InvalidShapeError
from .imaging import ImageTensor, read_png, resize, to_uint8, write_png

DOMAIN_SIMPLE = "d_s"
DOMAIN_BROAD = "d_g"
DOMAIN_PSEUDO_REAL = "pseudo_real"

STAGE_KINDS = ("gaussian_blur", "anisotropic_blur", "gaussian_noise", "resize", "jpeg")


@dataclass(frozen=True)
class DegradationStage:
    """One fully-parameterized degradation step."""

    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ConfigError(f"unknown stage kind {self.kind!r}")


@dataclass(frozen=True)
class DegradationRecipe:
    """Ordered stages plus the final downsampling factor and the sampling seed."""

    stages: tuple[DegradationStage, ...]
    final_scale: int
    seed: int

    def to_json(self) -> dict:
        return {
            "stages": [asdict(s) for s in self.stages],
            "final_scale": self.final_scale,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(doc: dict) -> "DegradationRecipe":
        stages = tuple(DegradationStage(s["kind"], dict(s["params"])) for s in doc["stages"])
        return DegradationRecipe(stages, int(doc["final_scale"]), int(doc["seed"]))

    def uses_jpeg(self) -> bool:
        return any(s.kind == "jpeg" for s in self.stages)


@dataclass(frozen=True)
class PipelineConfig:
    """Parameter ranges for sampling recipes of one degradation domain.

    `rounds` repetitions of `stages_per_round` are sampled before the final
    bicubic downsample. The simple domain ships with zero rounds (plain
    bicubic); the broad domain must carry at least twice as many stages as
    the simple one, which zero rounds makes trivially true for any broad
    config with rounds >= 1.
    """

    domain: str
    scale: int = 4
    rounds: int = 0
    stages_per_round: tuple[str, ...] = ("blur", "resize", "noise", "jpeg")
    blur_sigma: tuple[float, float] = (0.2, 3.0)
    aniso_fraction: float = 0.25
    noise_sigma: tuple[float, float] = (1.0 / 255.0, 25.0 / 255.0)
    resize_factor: tuple[float, float] = (0.5, 1.5)
    resize_modes: tuple[str, ...] = ("bicubic", "bilinear", "nearest")
    jpeg_quality: tuple[int, int] = (30, 95)
    shuffle_order: bool = False

    def __post_init__(self):
        if self.domain not in (DOMAIN_SIMPLE, DOMAIN_BROAD, DOMAIN_PSEUDO_REAL):
            raise ConfigError(f"unknown domain tag {self.domain!r}")
        if self.scale < 1:
            raise ConfigError("scale must be >= 1")
        if self.rounds < 0 or self.rounds > 2:
            raise ConfigError("rounds must be 0, 1, or 2")
        for name in ("blur_sigma", "noise_sigma", "resize_factor", "jpeg_quality"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi or lo <= 0:
                raise ConfigError(f"invalid range for {name}: ({lo}, {hi})")
        unknown = set(self.stages_per_round) - {"blur", "resize", "noise", "jpeg"}
        if unknown:
            raise ConfigError(f"unknown stage names {sorted(unknown)}")

    def stage_count(self) -> int:
        return self.rounds * len(self.stages_per_round)


def simple_config(scale: int = 4) -> PipelineConfig:
    """Bicubic-only labeled domain: no extra stages."""
    return PipelineConfig(domain=DOMAIN_SIMPLE, scale=scale, rounds=0)


def broad_config(scale: int = 4, rounds: int = 2) -> PipelineConfig:
    """Two randomized rounds of blur -> resize -> noise -> jpeg, then downsample.

    Deliberately harsh: blur and noise floors keep every sample clearly
    degraded, and resize factors always shrink toward (often past) the LR
    scale so later noise and compression act on near-LR pixels the way they
    do in the wild. The trailing exact resize restores the 1/scale contract.
    A model trained on this trades clean-domain quality for robustness, which
    is the point of a generalist.
    """
    return PipelineConfig(
        domain=DOMAIN_BROAD,
        scale=scale,
        rounds=rounds,
        blur_sigma=(0.3, 3.0),
        noise_sigma=(2.0 / 255.0, 25.0 / 255.0),
        resize_factor=(0.3, 1.0),
        jpeg_quality=(30, 95),
    )


def pseudo_real_config(scale: int = 4) -> PipelineConfig:
    """Held-out fixed degradation standing in for an unknown real-world camera.

    All ranges collapse to points: blur sigma 1.5, bicubic down to the target
    scale, then noise sigma 10/255 and JPEG quality 60 applied at LR
    resolution, where sensor noise and compression actually live. Training
    code must only ever see the LR images this produces, never the recipe.
    """
    return PipelineConfig(
        domain=DOMAIN_PSEUDO_REAL,
        scale=scale,
        rounds=1,
        stages_per_round=("blur", "resize", "noise", "jpeg"),
        blur_sigma=(1.5, 1.5),
        aniso_fraction=0.0,
        noise_sigma=(10.0 / 255.0, 10.0 / 255.0),
        resize_factor=(1.0 / scale, 1.0 / scale),
        resize_modes=("bicubic",),
        jpeg_quality=(60, 60),
    )


def check_domain_gap(simple: PipelineConfig, broad: PipelineConfig) -> None:
    """The broad domain must be much larger: at least 2x the simple stage count."""
    if broad.stage_count() < 2 * simple.stage_count() or broad.stage_count() <= simple.stage_count():
        raise ConfigError(
            f"broad config has {broad.stage_count()} stages, "
            f"simple has {simple.stage_count()}; need strictly more and >= 2x"
        )


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return float(lo)
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_recipe(cfg: PipelineConfig, seed: int) -> DegradationRecipe:
    """Draw one fully-resolved recipe; the same (cfg, seed) always gives the same recipe.

    Blur and noise sigmas are drawn log-uniformly, resize factors and JPEG
    qualities uniformly.
    """
    rng = np.random.default_rng(seed)
    stages: list[DegradationStage] = []
    for _ in range(cfg.rounds):
        order = list(cfg.stages_per_round)
        if cfg.shuffle_order:
            order = [order[i] for i in rng.permutation(len(order))]
        for name in order:
            if name == "blur":
                if rng.uniform() < cfg.aniso_fraction:
                    sx = _log_uniform(rng, *cfg.blur_sigma)
                    sy = _log_uniform(rng, *cfg.blur_sigma)
                    theta = float(rng.uniform(0.0, np.pi))
                    stages.append(
                        DegradationStage(
                            "anisotropic_blur",
                            {"sigma_x": sx, "sigma_y": sy, "theta": theta},
                        )
                    )
                else:
                    stages.append(
                        DegradationStage(
                            "gaussian_blur", {"sigma": _log_uniform(rng, *cfg.blur_sigma)}
                        )
                    )
            elif name == "resize":
                lo, hi = cfg.resize_factor
                stages.append(
                    DegradationStage(
                        "resize",
                        {
                            "mode": str(rng.choice(list(cfg.resize_modes))),
                            "factor": float(rng.uniform(lo, hi)),
                        },
                    )
                )
            elif name == "noise":
                stages.append(
                    DegradationStage(
                        "gaussian_noise",
                        {
                            "sigma": _log_uniform(rng, *cfg.noise_sigma),
                            "seed": int(rng.integers(0, 2**31 - 1)),
                        },
                    )
                )
            elif name == "jpeg":
                lo, hi = cfg.jpeg_quality
                stages.append(
                    DegradationStage("jpeg", {"quality": int(rng.integers(lo, hi + 1))})
                )
    return DegradationRecipe(tuple(stages), cfg.scale, int(seed))


# ---------------------------------------------------------------------------
# Stage application
# ---------------------------------------------------------------------------


def _gaussian_kernel_2d(sigma_x: float, sigma_y: float, theta: float) -> np.ndarray:
    radius = max(1, min(10, int(np.ceil(3.0 * max(sigma_x, sigma_y)))))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    ct, st = np.cos(theta), np.sin(theta)
    # Rotate coordinates into the kernel's principal axes.
    u = ct * xx + st * yy
    v = -st * xx + ct * yy
    k = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return k / k.sum()


def _apply_blur(img: ImageTensor, kernel: np.ndarray) -> ImageTensor:
    out = np.empty_like(img.data)
    for c in range(img.channels):
        out[..., c] = convolve(img.data[..., c], kernel, mode="nearest")
    return ImageTensor(np.clip(out, 0.0, 1.0), img.colorspace, img.meta)


def _apply_noise(img: ImageTensor, sigma: float, seed: int) -> ImageTensor:
    if sigma == 0.0:
        return img
    rng = np.random.default_rng(seed)
    noisy = img.data + sigma * rng.standard_normal(img.data.shape)
    return ImageTensor(np.clip(noisy, 0.0, 1.0), img.colorspace, img.meta)


def _apply_jpeg(img: ImageTensor, quality: int) -> ImageTensor:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img.data)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageTensor(arr, img.colorspace, img.meta)


def apply_stage(img: ImageTensor, stage: DegradationStage) -> ImageTensor:
    if stage.kind == "gaussian_blur":
        s = stage.params["sigma"]
        return _apply_blur(img, _gaussian_kernel_2d(s, s, 0.0))
    if stage.kind == "anisotropic_blur":
        p = stage.params
        return _apply_blur(img, _gaussian_kernel_2d(p["sigma_x"], p["sigma_y"], p["theta"]))
    if stage.kind == "gaussian_noise":
        return _apply_noise(img, stage.params["sigma"], stage.params.get("seed", 0))
    if stage.kind == "resize":
        f = stage.params["factor"]
        out_h = max(1, int(round(img.height * f)))
        out_w = max(1, int(round(img.width * f)))
        return resize(img, out_h, out_w, mode=stage.params["mode"])
    if stage.kind == "jpeg":
        return _apply_jpeg(img, stage.params["quality"])
    raise ConfigError(f"unknown stage kind {stage.kind!r}")


def apply_recipe(hr: ImageTensor, recipe: DegradationRecipe) -> ImageTensor:
    """Run all stages in order, then resize to exactly 1/final_scale of the source.

    The trailing resize absorbs whatever intermediate sizes the resize stages
    produced, so the net spatial scale is always 1/final_scale; it is skipped
    when a recipe's own resize stages already landed on the target size, so
    stages placed after them (noise, compression) act on true LR pixels.
    """
    scale = recipe.final_scale
    if hr.height % scale or hr.width % scale:
        raise InvalidShapeError(f"{hr.height}x{hr.width} not divisible by scale {scale}")
    out = hr
    for stage in recipe.stages:
        out = apply_stage(out, stage)
    target = (hr.height // scale, hr.width // scale)
    if (out.height, out.width) == target:
        return out
    return resize(out, *target, mode="bicubic")


# ---------------------------------------------------------------------------
# Dataset synthesis
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    """Index of one synthesized LR dataset: (hr, lr, recipe) triples."""

    version: int
    scale: int
    seed: int
    entries: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        doc = {
            "version": self.version,
            "scale": self.scale,
            "seed": self.seed,
            "entries": self.entries,
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))

    @staticmethod
    def load(path: str | Path) -> "Manifest":
        doc = json.loads(Path(path).read_text())
        return Manifest(
            version=int(doc["version"]),
            scale=int(doc["scale"]),
            seed=int(doc["seed"]),
            entries=list(doc["entries"]),
        )


def per_image_seed(global_seed: int, index: int) -> int:
    """Stable scalar seed for image `index`; parallel and serial runs agree."""
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


def synthesize_dataset(
    hr_dir: str | Path, cfg: PipelineConfig, out_dir: str | Path, seed: int
) -> Manifest:
    """Degrade every PNG under hr_dir and write LR images plus a manifest.

    Each image gets its own recipe sampled from (seed, image index), so the
    output is independent of processing order. LR images are stored as PNG;
    JPEG artifacts survive inside the pixels, not the container.
    """
    hr_dir = Path(hr_dir)
    out_dir = Path(out_dir)
    hr_paths = sorted(hr_dir.glob("*.png"))
    if not hr_paths:
        raise DataError(f"no PNG images found in {hr_dir}")
    lr_dir = out_dir / "lr"
    lr_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(version=1, scale=cfg.scale, seed=int(seed))
    for idx, hr_path in enumerate(hr_paths):
        hr = read_png(hr_path)
        recipe = sample_recipe(cfg, per_image_seed(seed, idx))
        lr = apply_recipe(hr, recipe)
        lr_path = lr_dir / hr_path.name
        write_png(lr, lr_path)
        manifest.entries.append(
            {
                "hr_path": str(hr_path.resolve()),
                "lr_path": str(lr_path.resolve()),
                "recipe": recipe.to_json(),
            }
        )
    manifest.save(out_dir / "manifest.json")
    return manifest
