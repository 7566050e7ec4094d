"""Random channel gates.

A gate holds one bit per channel: 1 means the channel is available and is
fed to the generator, 0 means it is missing and must be synthesized. The
inverse gate selects the missing channels, which are the only ones scored.
Gated stacks keep their channel count; closed channels become zero planes.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from pixn2n.dataset import MultiChannelImage


@dataclass(frozen=True)
class GateVector:
    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"gate bits must be 0 or 1, got {self.bits}")
        if not bits:
            raise ValueError("gate must have at least one bit")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return self.to_string()

    @classmethod
    def from_string(cls, s):
        s = s.strip()
        if not s or set(s) - {"0", "1"}:
            raise ValueError(f"gate string must contain only '0'/'1', got {s!r}")
        return cls(tuple(int(ch) for ch in s))

    @classmethod
    def missing(cls, n, missing_channels):
        """Gate with exactly the given channels closed."""
        missing_channels = set(missing_channels)
        return cls(tuple(0 if i in missing_channels else 1 for i in range(n)))

    def to_string(self):
        return "".join(str(b) for b in self.bits)

    @property
    def open_channels(self):
        return [i for i, b in enumerate(self.bits) if b]

    @property
    def missing_channels(self):
        return [i for i, b in enumerate(self.bits) if not b]

    @property
    def is_valid_scenario(self):
        """At least one channel available and at least one missing."""
        return 0 < sum(self.bits) < len(self.bits)

    def validate(self, n=None):
        if n is not None and len(self) != n:
            raise ValueError(f"gate length {len(self)} does not match {n} channels")
        if not self.is_valid_scenario:
            raise ValueError(f"gate {self} must have at least one open and one closed channel")
        return self

    def as_array(self, dtype=np.float64):
        return np.asarray(self.bits, dtype=dtype)


def invert(gate):
    return GateVector(tuple(1 - b for b in gate.bits))


@dataclass(frozen=True)
class GatePolicy:
    """Close a uniformly drawn k in {1..max_closed} channels, chosen uniformly.

    ``always_closed`` pins channels that are missing in every draw (the
    dedicated one-target baselines); they count towards ``max_closed``.
    """

    max_closed: int
    always_closed: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "always_closed", tuple(sorted(set(self.always_closed))))
        if self.max_closed < 1:
            raise ValueError(f"max_closed must be >= 1, got {self.max_closed}")
        if len(self.always_closed) > self.max_closed:
            raise ValueError("more pinned channels than max_closed allows")

    def check(self, n):
        if self.max_closed > n - 1:
            raise ValueError(f"max_closed={self.max_closed} must be <= N-1={n - 1}")
        if any(not 0 <= c < n for c in self.always_closed):
            raise ValueError(f"pinned channels {self.always_closed} out of range for N={n}")
        return self

    def to_dict(self):
        return {"max_closed": self.max_closed, "always_closed": list(self.always_closed)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["max_closed"]), tuple(d.get("always_closed", ())))


def sample_gate(n, policy, rng):
    policy.check(n)
    pinned = list(policy.always_closed)
    free = [i for i in range(n) if i not in pinned]
    k_min = max(1, len(pinned))
    k = int(rng.integers(k_min, policy.max_closed + 1))
    extra = rng.choice(len(free), size=k - len(pinned), replace=False) if k > len(pinned) else []
    closed = set(pinned) | {free[int(i)] for i in extra}
    return GateVector.missing(n, closed)


def _gate_mask(gate, n_channels, like):
    if len(gate) != n_channels:
        raise ValueError(f"gate length {len(gate)} does not match {n_channels} channels")
    m = gate.as_array()
    shape = [1] * like.ndim
    shape[-3] = n_channels
    return m.reshape(shape)


def _apply(stack, gate):
    if isinstance(stack, MultiChannelImage):
        return stack.with_planes(_apply(stack.planes, gate))
    if hasattr(stack, "new_tensor"):  # torch tensor
        n = stack.shape[-3]
        return stack * stack.new_tensor(_gate_mask(gate, n, stack))
    stack = np.asarray(stack)
    mask = _gate_mask(gate, stack.shape[-3], stack).astype(stack.dtype)
    return stack * mask


def apply_input_gate(stack, gate):
    """Zero the closed channels. Works on MultiChannelImage, arrays or tensors (channel axis -3)."""
    return _apply(stack, gate)


def apply_output_gate(stack, inverse_gate):
    """Keep only the channels flagged in ``inverse_gate`` (the missing ones)."""
    return _apply(stack, inverse_gate)


def gate_batch_masks(gates, dtype=np.float32):
    """(B, N, 1, 1) input masks for a list of per-sample gates."""
    m = np.stack([g.as_array(dtype) for g in gates])
    return m[:, :, None, None]


def count_missing_scenarios(n):
    if n < 2:
        raise ValueError("need at least two channels")
    return 2**n - 2


def iter_missing_scenarios(n, n_missing=None):
    """Yield every valid gate (optionally only those with exactly ``n_missing`` closed)."""
    sizes = range(1, n) if n_missing is None else [n_missing]
    for k in sizes:
        for closed in itertools.combinations(range(n), k):
            yield GateVector.missing(n, closed)


def enumerate_missing_scenarios(n):
    return count_missing_scenarios(n)


def n_scenarios_with(n, n_missing):
    return math.comb(n, n_missing)
