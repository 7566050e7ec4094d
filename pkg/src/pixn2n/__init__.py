"""Gated N-to-N coarse-to-fine conditional GAN for missing-channel synthesis."""

from pixn2n.dataset import (
    DEFAULT_MARKERS,
    MarkerRegistry,
    MultiChannelImage,
    PatchRecord,
    TissueMask,
)
from pixn2n.gating import GatePolicy, GateVector

__all__ = [
    "DEFAULT_MARKERS",
    "GatePolicy",
    "GateVector",
    "MarkerRegistry",
    "MultiChannelImage",
    "PatchRecord",
    "TissueMask",
]

__version__ = "0.1.0"
