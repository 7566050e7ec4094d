import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pixn2n.dataset import MarkerRegistry, MultiChannelImage
from pixn2n.gating import (
    GatePolicy,
    GateVector,
    apply_input_gate,
    apply_output_gate,
    count_missing_scenarios,
    enumerate_missing_scenarios,
    invert,
    iter_missing_scenarios,
    sample_gate,
)


def all_valid_gates(n):
    return [GateVector(b) for b in itertools.product((0, 1), repeat=n) if 0 < sum(b) < n]


def test_invert_examples():
    assert invert(GateVector((1, 1, 1, 0))).bits == (0, 0, 0, 1)
    assert invert(GateVector((1, 0, 1, 0))).bits == (0, 1, 0, 1)


def test_invert_involution_exhaustive_n4():
    gates = all_valid_gates(4)
    assert len(gates) == 2**4 - 2
    for g in gates:
        assert invert(invert(g)) == g


def test_gate_string_roundtrip():
    g = GateVector.from_string("11011011101")
    assert str(g) == "11011011101"
    assert g.missing_channels == [2, 5, 9]
    with pytest.raises(ValueError):
        GateVector.from_string("1102")


def test_validate_rejects_all_open_or_closed():
    with pytest.raises(ValueError):
        GateVector((1, 1)).validate()
    with pytest.raises(ValueError):
        GateVector((0, 0)).validate()
    with pytest.raises(ValueError):
        GateVector((0, 1)).validate(3)


# --- sample_gate -----------------------------------------------------------


def test_sample_forced_count():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = sample_gate(4, GatePolicy(1), rng)
        assert len(g.missing_channels) == 1 and len(g.open_channels) == 3


def test_sample_range_n11():
    rng = np.random.default_rng(1)
    for _ in range(500):
        g = sample_gate(11, GatePolicy(10), rng)
        assert 1 <= len(g.missing_channels) <= 10
        assert g.is_valid_scenario


def test_sample_policy_guards():
    with pytest.raises(ValueError):
        GatePolicy(0)
    with pytest.raises(ValueError):
        sample_gate(4, GatePolicy(4), np.random.default_rng(0))


def test_sample_closed_frequency_matches_enumeration_oracle():
    n, k_max, draws = 5, 4, 100_000
    # oracle: enumerate (k, subset) pairs with probability 1/k_max * 1/C(n, k)
    p_closed = np.zeros(n)
    for k in range(1, k_max + 1):
        for subset in itertools.combinations(range(n), k):
            for i in subset:
                p_closed[i] += 1 / k_max / math.comb(n, k)
    rng = np.random.default_rng(2024)
    counts = np.zeros(n)
    for _ in range(draws):
        counts[sample_gate(n, GatePolicy(k_max), rng).missing_channels] += 1
    expected = draws * p_closed
    sd = np.sqrt(draws * p_closed * (1 - p_closed))
    assert np.all(np.abs(counts - expected) <= 3 * sd), (counts, expected, sd)


def test_pinned_target_always_closed():
    rng = np.random.default_rng(3)
    pol = GatePolicy(max_closed=10, always_closed=(4,))
    sizes = set()
    for _ in range(2000):
        g = sample_gate(11, pol, rng)
        assert 4 in g.missing_channels and g.is_valid_scenario
        sizes.add(len(g.missing_channels))
    assert sizes == set(range(1, 11))
    dedicated = GatePolicy(max_closed=1, always_closed=(2,))
    assert sample_gate(4, dedicated, rng) == GateVector((1, 1, 0, 1))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 12), st.data())
def test_sample_never_all_open_or_closed(n, data):
    k_max = data.draw(st.integers(1, n - 1))
    seed = data.draw(st.integers(0, 2**31 - 1))
    g = sample_gate(n, GatePolicy(k_max), np.random.default_rng(seed))
    assert g.is_valid_scenario and len(g.missing_channels) <= k_max


# --- gate application ------------------------------------------------------


def _img(planes):
    return MultiChannelImage(planes, MarkerRegistry(tuple(f"m{i}" for i in range(len(planes)))),
                             normalized=True)


def test_input_gate_all_open_identity(rng):
    s = rng.uniform(size=(3, 8, 8))
    out = apply_input_gate(_img(s), GateVector((1, 1, 1)))
    np.testing.assert_array_equal(out.planes, s)


def test_input_gate_constant_example():
    s = np.full((2, 4, 4), 0.5)
    out = apply_input_gate(_img(s), GateVector((1, 0))).planes
    assert (out[0] == 0.5).all() and (out[1] == 0).all()


def test_input_gate_per_pixel_oracle(rng):
    s = rng.uniform(0.01, 1, size=(3, 10, 10))
    out = apply_input_gate(s, GateVector((0, 1, 0)))
    for c in range(3):
        for r in range(10):
            for q in range(10):
                assert out[c, r, q] == (s[c, r, q] if c == 1 else 0.0)


def test_output_gate_all_ones_identity(rng):
    s = rng.uniform(size=(4, 6, 6))
    np.testing.assert_array_equal(apply_output_gate(s, GateVector((1, 1, 1, 1))), s)


def test_gate_length_mismatch_rejected(rng):
    s = rng.uniform(size=(3, 6, 6))
    with pytest.raises(ValueError):
        apply_input_gate(s, GateVector((1, 0)))
    with pytest.raises(ValueError):
        apply_output_gate(s, GateVector((1, 0, 1, 1)))


def test_gates_on_torch_batches():
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    out = apply_input_gate(x, GateVector((1, 0, 1)))
    assert out.dtype == torch.float64
    assert torch.equal(out[:, 1], torch.zeros(2, 4, 4, dtype=torch.float64))
    assert torch.equal(out[:, 0], x[:, 0])


def test_channel_partition_oracle(rng):
    s = rng.uniform(0.01, 1, size=(5, 8, 8))
    for g in all_valid_gates(5):
        a = apply_input_gate(s, g)
        b = apply_output_gate(s, invert(g))
        for c in range(5):
            populated = [bool(np.any(a[c])), bool(np.any(b[c]))]
            assert sum(populated) == 1
            assert populated[0] == bool(g.bits[c])


def test_partition_identity_and_idempotence_exhaustive():
    rng = np.random.default_rng(11)
    for n in range(2, 7):
        s = rng.uniform(size=(n, 5, 5))
        for g in all_valid_gates(n):
            np.testing.assert_array_equal(apply_input_gate(s, g) + apply_output_gate(s, invert(g)), s)
            once = apply_input_gate(s, g)
            np.testing.assert_array_equal(apply_input_gate(once, g), once)


# --- scenario enumeration --------------------------------------------------


def test_scenario_counts():
    assert enumerate_missing_scenarios(11) == 2046
    assert count_missing_scenarios(2) == 2


def test_scenario_count_vs_subset_oracle():
    for n in range(2, 9):
        oracle = sum(1 for r in range(n + 1) for s in itertools.combinations(range(n), r)
                     if 0 < len(s) < n)
        gates = list(iter_missing_scenarios(n))
        assert len(gates) == oracle == count_missing_scenarios(n)
        assert len(set(gates)) == len(gates)
    assert count_missing_scenarios(4) == 14


def test_scenario_rejects_tiny_n():
    with pytest.raises(ValueError):
        count_missing_scenarios(1)
