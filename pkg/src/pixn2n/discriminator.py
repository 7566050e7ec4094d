"""Multi-scale conditional patch discriminators with per-layer feature taps."""

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from pixn2n.generator import init_weights

KERNEL = 4
PAD = math.ceil((KERNEL - 1) / 2)


@dataclass
class DiscriminatorConfig:
    n_channels: int = 11
    n_scales: int = 3
    n_layers: int = 4  # feature-producing conv layers per scale (T)
    base_width: int = 64

    def __post_init__(self):
        if self.n_scales < 1:
            raise ValueError("need at least one discriminator scale")
        if self.n_layers < 2:
            raise ValueError("need at least two feature layers per scale")

    @property
    def in_channels(self):
        return 2 * self.n_channels

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def tiny(cls, n_channels=4, **kw):
        kw = {"base_width": 8} | kw
        return cls(n_channels=n_channels, **kw)


@dataclass
class ScaleOutput:
    prediction: torch.Tensor
    features: list


class PatchDiscriminator(nn.Module):
    """T conv blocks (strided except the last) followed by a 1-channel prediction conv."""

    def __init__(self, in_ch, width, n_layers):
        super().__init__()
        blocks = [nn.Sequential(nn.Conv2d(in_ch, width, KERNEL, 2, PAD), nn.LeakyReLU(0.2, True))]
        nf = width
        for i in range(1, n_layers):
            nf_prev, nf = nf, min(nf * 2, 512)
            stride = 2 if i < n_layers - 1 else 1
            blocks.append(nn.Sequential(
                nn.Conv2d(nf_prev, nf, KERNEL, stride, PAD),
                nn.InstanceNorm2d(nf, affine=False),
                nn.LeakyReLU(0.2, True),
            ))
        self.blocks = nn.ModuleList(blocks)
        self.predict = nn.Conv2d(nf, 1, KERNEL, 1, PAD)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return ScaleOutput(self.predict(x), feats)


class MultiscaleDiscriminator(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        self.scales = nn.ModuleList(
            PatchDiscriminator(config.in_channels, config.base_width, config.n_layers)
            for _ in range(config.n_scales)
        )

    def __len__(self):
        return len(self.scales)

    def __getitem__(self, k):
        return self.scales[k]

    def pyramid(self, x, y):
        if x.shape != y.shape:
            raise ValueError(f"X and Y shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
        if x.shape[-3] != self.config.n_channels:
            raise ValueError(f"expected {self.config.n_channels} channels, got {x.shape[-3]}")
        inp = torch.cat([x, y], dim=-3)
        levels = [inp]
        for _ in range(1, len(self.scales)):
            inp = F.avg_pool2d(inp, 2)
            levels.append(inp)
        return levels

    def forward(self, x, y):
        return [d(level) for d, level in zip(self.scales, self.pyramid(x, y))]


def build_discriminators(config, seed=0, dtype=torch.float32):
    discs = MultiscaleDiscriminator(config)
    init_weights(discs, torch.Generator().manual_seed(int(seed)))
    return discs.to(dtype)


def forward_multiscale(discs, X, Y):
    return discs(X, Y)
