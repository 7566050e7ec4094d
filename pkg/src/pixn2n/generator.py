"""Coarse-to-fine N-in / N-out generator.

Layout follows the two-level high-resolution image translation design:
a global network runs at half resolution, and a local enhancer at full
resolution fuses the global features into its own. Both levels emit
logits; the enhancer's logits are added to the upsampled global logits, so
a zeroed enhancer head reduces the full model to the coarse one exactly.
Outputs are ``(tanh(logits) + 1) / 2`` and therefore lie in [0, 1].
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

STAGES = ("coarse_only", "full")


@dataclass
class GeneratorConfig:
    n_channels: int = 11
    base_width: int = 32
    n_downsample: int = 4
    n_resblocks_global: int = 9
    n_resblocks_local: int = 3
    output_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.n_channels < 2:
            raise ValueError("generator needs at least 2 channels")
        for name in ("base_width", "n_downsample", "n_resblocks_global", "n_resblocks_local"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        self.output_range = tuple(self.output_range)

    @property
    def global_width(self):
        return 2 * self.base_width

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["output_range"] = list(self.output_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def tiny(cls, n_channels=4, **kw):
        """Reduced preset for desk-scale runs and tests."""
        kw = {"base_width": 8, "n_downsample": 2, "n_resblocks_global": 2,
              "n_resblocks_local": 1} | kw
        return cls(n_channels=n_channels, **kw)


def _norm(ch):
    return nn.InstanceNorm2d(ch, affine=False)


class ResnetBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), _norm(dim), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), _norm(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class GlobalGenerator(nn.Module):
    """Encoder / residual trunk / decoder; ``features`` returns the last decoder map."""

    def __init__(self, in_ch, out_ch, width, n_downsample, n_blocks):
        super().__init__()
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_ch, width, 7), _norm(width), nn.ReLU(True)]
        for i in range(n_downsample):
            m = 2**i
            layers += [nn.Conv2d(width * m, width * m * 2, 3, stride=2, padding=1),
                       _norm(width * m * 2), nn.ReLU(True)]
        m = 2**n_downsample
        layers += [ResnetBlock(width * m) for _ in range(n_blocks)]
        for i in range(n_downsample):
            m = 2 ** (n_downsample - i)
            layers += [nn.ConvTranspose2d(width * m, width * m // 2, 3, stride=2, padding=1,
                                          output_padding=1),
                       _norm(width * m // 2), nn.ReLU(True)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(width, out_ch, 7))

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.body(x))


class LocalEnhancer(nn.Module):
    def __init__(self, in_ch, out_ch, width, n_blocks):
        super().__init__()
        self.down = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(in_ch, width, 7), _norm(width), nn.ReLU(True),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), _norm(width * 2), nn.ReLU(True),
        )
        self.up = nn.Sequential(
            *[ResnetBlock(width * 2) for _ in range(n_blocks)],
            nn.ConvTranspose2d(width * 2, width, 3, stride=2, padding=1, output_padding=1),
            _norm(width), nn.ReLU(True),
        )
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(width, out_ch, 7))

    def forward(self, x, global_features):
        return self.head(self.up(self.down(x) + global_features))


def init_weights(module, generator):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                m.bias.zero_()


def to_unit_range(logits, output_range=(0.0, 1.0)):
    lo, hi = output_range
    return lo + (hi - lo) * (torch.tanh(logits) + 1.0) / 2.0


class Generator(nn.Module):
    def __init__(self, config, stage="full"):
        super().__init__()
        self.config = config
        self.stage = stage
        n, w = config.n_channels, config.base_width
        self.global_net = GlobalGenerator(n, n, config.global_width, config.n_downsample,
                                          config.n_resblocks_global)
        self.local_net = LocalEnhancer(n, n, w, config.n_resblocks_local)

    @property
    def stage(self):
        return self._stage

    @stage.setter
    def stage(self, value):
        if value not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {value!r}")
        self._stage = value

    @property
    def divisor(self):
        return 2 ** (self.config.n_downsample + 1)

    def check_input(self, x, divisor=None):
        divisor = divisor or self.divisor
        if x.shape[-3] != self.config.n_channels:
            raise ValueError(f"expected {self.config.n_channels} channels, got {x.shape[-3]}")
        H, W = x.shape[-2:]
        if H % divisor or W % divisor:
            raise ValueError(
                f"spatial size {H}x{W} is not divisible by {divisor} "
                f"(2^(n_downsample+1)); pad or crop the input"
            )

    def coarse(self, x):
        """Global network at its native resolution (used directly by the coarse training stage)."""
        self.check_input(x, 2**self.config.n_downsample)
        return to_unit_range(self.global_net(x), self.config.output_range)

    def logits(self, x):
        self.check_input(x)
        x_half = F.avg_pool2d(x, 2)
        feats = self.global_net.features(x_half)
        coarse_logits = F.interpolate(self.global_net.head(feats), scale_factor=2,
                                      mode="bilinear", align_corners=False)
        if self.stage == "coarse_only":
            return coarse_logits
        return coarse_logits + self.local_net(x, feats)

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        y = to_unit_range(self.logits(x), self.config.output_range)
        return y.squeeze(0) if squeeze else y


def build_generator(config, seed=0, stage="full", dtype=torch.float32):
    gen = Generator(config, stage)
    init_weights(gen, torch.Generator().manual_seed(int(seed)))
    return gen.to(dtype)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def synthesize(gen, x):
    """Forward pass on a numpy (N, H, W) or (B, N, H, W) array; returns numpy."""
    param = next(gen.parameters())
    with torch.no_grad():
        t = torch.as_tensor(np.asarray(x), dtype=param.dtype)
        return gen(t).cpu().numpy()
