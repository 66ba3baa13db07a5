"""SR generators, the shared patch discriminator, model coupling, and checkpoints.

The generator is a compact residual-in-residual dense network with a
pixel-shuffle upsampler; the default size is deliberately small so CPU runs
stay tractable. The specialist/generalist coupling supports a frozen
generalist (static / single_fixed), an EMA-shadow generalist, and the naive
imitation baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from .errors import ConfigError, IntegrityError, InvalidInputError, InvalidStateError
from .losses import PredictionQuad
from .tensorio import load_tensors, save_tensors

PAIR_MODES = ("static", "ema", "single_fixed", "naive_distill")


@dataclass(frozen=True)
class GeneratorConfig:
    scale: int = 4
    channels: int = 32
    growth: int = 16
    blocks: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.scale not in (1, 2, 4, 8):
            raise ConfigError(f"scale must be 1, 2, 4, or 8, got {self.scale}")
        if self.channels < 1 or self.growth < 1 or self.blocks < 1:
            raise ConfigError("channels, growth, and blocks must be positive")

    def same_architecture(self, other: "GeneratorConfig") -> bool:
        """True when the two configs build identically shaped networks (seed aside)."""
        return (self.scale, self.channels, self.growth, self.blocks) == (
            other.scale, other.channels, other.growth, other.blocks,
        )


@dataclass(frozen=True)
class DiscriminatorConfig:
    base: int = 32
    seed: int = 1

    def __post_init__(self):
        if self.base < 1:
            raise ConfigError("base channel count must be positive")


class _DenseBlock(nn.Module):
    def __init__(self, nf: int, gc: int):
        super().__init__()
        self.conv1 = nn.Conv2d(nf, gc, 3, 1, 1)
        self.conv2 = nn.Conv2d(nf + gc, gc, 3, 1, 1)
        self.conv3 = nn.Conv2d(nf + 2 * gc, gc, 3, 1, 1)
        self.conv4 = nn.Conv2d(nf + 3 * gc, nf, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        x1 = self.lrelu(self.conv1(x))
        x2 = self.lrelu(self.conv2(torch.cat((x, x1), 1)))
        x3 = self.lrelu(self.conv3(torch.cat((x, x1, x2), 1)))
        x4 = self.conv4(torch.cat((x, x1, x2, x3), 1))
        return x4 * 0.2 + x


class _RRDB(nn.Module):
    def __init__(self, nf: int, gc: int):
        super().__init__()
        self.db1 = _DenseBlock(nf, gc)
        self.db2 = _DenseBlock(nf, gc)

    def forward(self, x):
        out = self.db2(self.db1(x))
        return out * 0.2 + x


class SRGenerator(nn.Module):
    """Fully convolutional x`scale` generator; output is unclamped during training.

    A pixel-shuffle trunk predicts the residual on top of a bicubic upsample
    of the input, so a freshly initialized network already reproduces the
    input faithfully and training spends its budget on detail.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        nf, gc = cfg.channels, cfg.growth
        self.conv_first = nn.Conv2d(3, nf, 3, 1, 1)
        self.body = nn.Sequential(*[_RRDB(nf, gc) for _ in range(cfg.blocks)])
        self.conv_body = nn.Conv2d(nf, nf, 3, 1, 1)
        ups = []
        n_stages = {1: 0, 2: 1, 4: 2, 8: 3}[cfg.scale]
        for _ in range(n_stages):
            ups += [nn.Conv2d(nf, nf * 4, 3, 1, 1), nn.PixelShuffle(2), nn.LeakyReLU(0.2, inplace=True)]
        self.upsample = nn.Sequential(*ups)
        self.conv_hr = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_last = nn.Conv2d(nf, 3, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2, inplace=True)
        self._init_weights(cfg.seed)

    def _init_weights(self, seed: int):
        # default-scale conv init, drawn from a seeded generator so builds are
        # pure functions of the config; down-scaled inits stall optimization
        # at this depth and budget
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=gen)
                fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
                bound = 1.0 / math.sqrt(fan_in)
                nn.init.uniform_(m.bias, -bound, bound, generator=gen)
        # zero residual head: the initial forward pass is exactly the upsample
        nn.init.zeros_(self.conv_last.weight)
        nn.init.zeros_(self.conv_last.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat = self.conv_first(x)
        feat = feat + self.conv_body(self.body(feat))
        feat = self.upsample(feat)
        residual = self.conv_last(self.lrelu(self.conv_hr(feat)))
        if self.cfg.scale == 1:
            return residual + x
        base = torch.nn.functional.interpolate(
            x, scale_factor=self.cfg.scale, mode="bicubic", align_corners=False
        )
        return residual + base


class PatchDiscriminator(nn.Module):
    """5-layer strided patch critic with spectral normalization; emits raw logits."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base
        gen = torch.Generator().manual_seed(cfg.seed)
        layers = []
        # spectral_norm seeds its power-iteration vectors from the global RNG;
        # fork it so construction is a pure function of cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            chans = [(3, b, 2), (b, 2 * b, 2), (2 * b, 4 * b, 2), (4 * b, 4 * b, 1)]
            for cin, cout, stride in chans:
                conv = nn.Conv2d(cin, cout, 4 if stride == 2 else 3, stride, 1)
                nn.init.kaiming_normal_(conv.weight, a=0.2, generator=gen)
                nn.init.zeros_(conv.bias)
                layers += [spectral_norm(conv), nn.LeakyReLU(0.2, inplace=True)]
            head = nn.Conv2d(4 * b, 1, 3, 1, 1)
            nn.init.kaiming_normal_(head.weight, a=0.2, generator=gen)
            nn.init.zeros_(head.bias)
            layers.append(spectral_norm(head))
        self.net = nn.Sequential(*layers)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def build_generator(cfg: GeneratorConfig) -> SRGenerator:
    """Construct a generator whose initial parameters depend only on cfg."""
    return SRGenerator(cfg)


class ModelPair:
    """Trainable specialist + auxiliary generalist + shared discriminator.

    mode=static / single_fixed keep the generalist bit-frozen; mode=ema keeps
    it as an exponential moving average of the specialist; naive_distill uses
    a frozen generalist purely as a pseudo-label source.
    """

    def __init__(
        self,
        specialist: SRGenerator,
        generalist: SRGenerator,
        discriminator: PatchDiscriminator,
        mode: str,
        ema_decay: float = 0.999,
    ):
        if mode not in PAIR_MODES:
            raise ConfigError(f"mode must be one of {PAIR_MODES}, got {mode!r}")
        if not 0.0 <= ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1], got {ema_decay}")
        if mode in ("ema", "single_fixed") and not specialist.cfg.same_architecture(generalist.cfg):
            raise ConfigError(f"{mode} mode requires identical architectures")
        self.specialist = specialist
        self.generalist = generalist
        self.discriminator = discriminator
        self.mode = mode
        self.ema_decay = ema_decay
        for p in self.generalist.parameters():
            p.requires_grad_(False)
        self.generalist.eval()


def ema_update(pair: ModelPair) -> None:
    """generalist <- decay * generalist + (1 - decay) * specialist, elementwise."""
    if pair.mode != "ema":
        raise InvalidStateError(f"ema_update requires mode='ema', pair is {pair.mode!r}")
    m = pair.ema_decay
    with torch.no_grad():
        for pg, ps in zip(pair.generalist.parameters(), pair.specialist.parameters()):
            pg.mul_(m).add_(ps, alpha=1.0 - m)


def predict_quad(
    pair: ModelPair,
    x_u: torch.Tensor,
    x_l: torch.Tensor,
    y_l: torch.Tensor | None = None,
) -> PredictionQuad:
    """Run both models on both inputs; generalist outputs come back detached."""
    ys_u = pair.specialist(x_u)
    ys_l = pair.specialist(x_l)
    with torch.no_grad():
        yg_u = pair.generalist(x_u)
        yg_l = pair.generalist(x_l)
    if y_l is None:
        y_l = torch.zeros_like(ys_l)
    return PredictionQuad(ys_u=ys_u, yg_u=yg_u, ys_l=ys_l, yg_l=yg_l, x_u=x_u, x_l=x_l, y_l=y_l)


def generalist_grad_magnitude(pair: ModelPair) -> float:
    """Largest absolute gradient sitting on any generalist parameter (0 when clean)."""
    worst = 0.0
    for p in pair.generalist.parameters():
        if p.grad is not None:
            worst = max(worst, float(p.grad.abs().max()))
    return worst


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------

_FORMAT_VERSION = 1


@dataclass
class CheckpointBundle:
    pair: ModelPair
    step: int
    rng_state: dict | None
    extra: dict | None


def _state_to_numpy(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()
    }


def _load_state(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    for k, v in module.state_dict().items():
        key = prefix + k
        if key not in tensors:
            raise IntegrityError(f"checkpoint is missing tensor {key!r}")
        state[k] = torch.from_numpy(tensors[key]).to(v.dtype).reshape(v.shape)
    module.load_state_dict(state, strict=True)


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(
    pair: ModelPair,
    path: str | Path,
    step: int = 0,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Write `<path>` (tensor archive) plus a JSON sidecar with arch/mode/checksum."""
    path = Path(path)
    tensors = {}
    tensors.update(_state_to_numpy(pair.specialist, "specialist."))
    tensors.update(_state_to_numpy(pair.generalist, "generalist."))
    tensors.update(_state_to_numpy(pair.discriminator, "discriminator."))
    sha = save_tensors(path, tensors)
    sidecar = {
        "format_version": _FORMAT_VERSION,
        "mode": pair.mode,
        "ema_decay": pair.ema_decay,
        "step": int(step),
        "arch_config": {
            "specialist": asdict(pair.specialist.cfg),
            "generalist": asdict(pair.generalist.cfg),
            "discriminator": asdict(pair.discriminator.cfg),
        },
        "rng_state": rng_state,
        "extra": extra,
        "sha256": sha,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(
    path: str | Path, expect_arch: GeneratorConfig | None = None
) -> CheckpointBundle:
    """Rebuild a ModelPair from disk, verifying the archive checksum.

    When `expect_arch` is given, the stored specialist architecture must
    match it exactly.
    """
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists() or not side.exists():
        raise InvalidInputError(f"checkpoint {path} or its sidecar is missing")
    meta = json.loads(side.read_text())
    if meta.get("format_version") != _FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint format {meta.get('format_version')}")
    spec_cfg = GeneratorConfig(**meta["arch_config"]["specialist"])
    gene_cfg = GeneratorConfig(**meta["arch_config"]["generalist"])
    disc_cfg = DiscriminatorConfig(**meta["arch_config"]["discriminator"])
    if expect_arch is not None and not spec_cfg.same_architecture(expect_arch):
        raise ConfigError(f"architecture mismatch: checkpoint {spec_cfg}, expected {expect_arch}")
    tensors = load_tensors(path, expect_sha256=meta["sha256"])
    pair = ModelPair(
        SRGenerator(spec_cfg),
        SRGenerator(gene_cfg),
        PatchDiscriminator(disc_cfg),
        mode=meta["mode"],
        ema_decay=float(meta["ema_decay"]),
    )
    _load_state(pair.specialist, tensors, "specialist.")
    _load_state(pair.generalist, tensors, "generalist.")
    _load_state(pair.discriminator, tensors, "discriminator.")
    return CheckpointBundle(
        pair=pair, step=int(meta["step"]), rng_state=meta["rng_state"], extra=meta["extra"]
    )
