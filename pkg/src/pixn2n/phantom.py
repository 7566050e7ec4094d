"""Seeded synthetic multi-channel stacks with known cross-channel dependence.

Every channel is an affine function of one shared smooth latent field
(optionally blurred) plus a small per-channel texture, so any channel can
be predicted from the others up to the texture term.
"""

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from pixn2n.dataset import MarkerRegistry, MultiChannelImage, write_image16
from pixn2n.utils import write_jsonl


@dataclass
class PhantomSpec:
    n_channels: int = 4
    size: int = 128
    n_samples: int = 6
    seed: int = 0
    gains: tuple | None = None
    offsets: tuple | None = None
    blur_radii: tuple | None = None
    texture_amplitudes: tuple | None = None
    texture_amplitude: float = 0.02
    n_waves: int = 4
    footprint: bool = False

    def __post_init__(self):
        n = self.n_channels
        if self.gains is None:
            self.gains = tuple((0.6 + 0.2 * (i % 2)) * (1 if i % 3 != 1 else -1) for i in range(n))
        if self.offsets is None:
            self.offsets = tuple(0.1 + (abs(a) if a < 0 else 0.0) for a in self.gains)
        if self.blur_radii is None:
            self.blur_radii = tuple(float(i % 3) for i in range(n))
        if self.texture_amplitudes is None:
            self.texture_amplitudes = (self.texture_amplitude,) * n
        for name in ("gains", "offsets", "blur_radii", "texture_amplitudes"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != n:
                raise ValueError(f"{name} needs {n} entries, got {len(v)}")
            setattr(self, name, v)
        if any(a == 0 for a in self.gains):
            raise ValueError("channel gains must be non-zero")

    def registry(self):
        return MarkerRegistry(tuple(f"marker{i}" for i in range(self.n_channels)))

    def to_dict(self):
        return dataclasses.asdict(self)


def latent_field(size, rng, n_waves=4):
    """Band-limited field in [0, 1]: a few random plane waves plus smoothed white noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    field = np.zeros((size, size))
    for _ in range(n_waves):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    noise = gaussian_filter(rng.standard_normal((size, size)), size / 16, mode="wrap")
    noise /= noise.std() + 1e-12
    field += noise
    field -= field.min()
    return field / field.max()


def _footprint(size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    cy, cx = rng.uniform(0.45, 0.55, size=2)
    ry, rx = rng.uniform(0.38, 0.48, size=2)
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)


def blur(field, radius):
    return gaussian_filter(field, radius, mode="reflect") if radius > 0 else field.copy()


def generate_phantom(spec):
    """Return ``[(sample_id, MultiChannelImage), ...]`` for the given spec."""
    registry = spec.registry()
    root = np.random.SeedSequence(spec.seed)
    samples = []
    for s, child in enumerate(root.spawn(spec.n_samples)):
        rng = np.random.default_rng(child)
        latent = latent_field(spec.size, rng, spec.n_waves)
        planes = []
        for i in range(spec.n_channels):
            texture = rng.standard_normal((spec.size, spec.size))
            plane = (spec.gains[i] * blur(latent, spec.blur_radii[i]) + spec.offsets[i]
                     + spec.texture_amplitudes[i] * texture)
            planes.append(np.clip(plane, 0.0, 1.0))
        planes = np.stack(planes)
        if spec.footprint:
            planes = planes * _footprint(spec.size, rng)[None]
        samples.append((f"s{s:02d}", MultiChannelImage(planes, registry, normalized=True)))
    return samples


def write_phantom(spec, root):
    """Write 16-bit PNGs in the per-marker directory layout plus ``manifest.jsonl``."""
    root = Path(root)
    rows = []
    registry = spec.registry()
    for sid, image in generate_phantom(spec):
        for c, marker in enumerate(registry.names):
            rel = Path(marker) / f"{sid}.png"
            write_image16(root / rel, image.planes[c])
            rows.append({"sample_id": sid, "marker": marker, "path": str(rel)})
    write_jsonl(root / "manifest.jsonl", rows)
    (root / "phantom.json").write_text(json.dumps(spec.to_dict(), indent=2))
    return root / "manifest.jsonl"
