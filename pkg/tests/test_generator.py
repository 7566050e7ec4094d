import pytest
import torch

from pixn2n.generator import GeneratorConfig, build_generator, count_parameters


def conv(i, o, k):
    return i * o * k * k + o


def hand_count(n, base=8):
    g, w = 2 * base, base
    global_net = (conv(n, g, 7) + conv(g, 2 * g, 3) + conv(2 * g, 4 * g, 3)
                  + 2 * 2 * conv(4 * g, 4 * g, 3)
                  + conv(4 * g, 2 * g, 3) + conv(2 * g, g, 3)
                  + conv(g, n, 7))
    local = (conv(n, w, 7) + conv(w, 2 * w, 3) + 1 * 2 * conv(2 * w, 2 * w, 3)
             + conv(2 * w, w, 3) + conv(w, n, 7))
    return global_net + local


@pytest.mark.parametrize("n", [3, 4, 11])
def test_parameter_count_matches_hand_formula(n):
    gen = build_generator(GeneratorConfig.tiny(n), seed=0)
    assert count_parameters(gen) == hand_count(n)


def test_same_seed_same_parameters():
    a = build_generator(GeneratorConfig.tiny(4), seed=7)
    b = build_generator(GeneratorConfig.tiny(4), seed=7)
    c = build_generator(GeneratorConfig.tiny(4), seed=8)
    for (ka, pa), (kb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(pa, pb)
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_io_arity():
    gen = build_generator(GeneratorConfig.tiny(4))
    assert gen.global_net.body[1].in_channels == 4
    assert gen.global_net.head[1].out_channels == 4
    assert gen.local_net.down[1].in_channels == 4
    assert gen.local_net.head[1].out_channels == 4


def test_zero_input_is_finite_and_bounded():
    gen = build_generator(GeneratorConfig.tiny(4), seed=1)
    y = gen(torch.zeros(1, 4, 64, 64))
    assert torch.isfinite(y).all()
    assert y.min() >= 0 and y.max() <= 1


def test_shape_preserved_unbatched():
    gen = build_generator(GeneratorConfig.tiny(4), seed=1)
    assert gen(torch.rand(4, 64, 64)).shape == (4, 64, 64)
    assert gen(torch.rand(2, 4, 32, 64)).shape == (2, 4, 32, 64)


def test_indivisible_size_rejected():
    gen = build_generator(GeneratorConfig.tiny(4))
    with pytest.raises(ValueError, match="divisible"):
        gen(torch.rand(1, 4, 60, 64))
    with pytest.raises(ValueError, match="channels"):
        gen(torch.rand(1, 3, 64, 64))


def test_coarse_only_equals_full_with_zeroed_enhancer_head():
    torch.manual_seed(0)
    x = torch.rand(1, 4, 64, 64, dtype=torch.float64)
    gen = build_generator(GeneratorConfig.tiny(4), seed=3, dtype=torch.float64)
    gen.stage = "coarse_only"
    coarse = gen(x)
    gen.stage = "full"
    assert not torch.allclose(gen(x), coarse)
    with torch.no_grad():
        gen.local_net.head[1].weight.zero_()
        gen.local_net.head[1].bias.zero_()
    torch.testing.assert_close(gen(x), coarse, rtol=0, atol=1e-14)


def test_forward_deterministic():
    gen = build_generator(GeneratorConfig.tiny(4), seed=3)
    x = torch.rand(2, 4, 32, 32)
    assert torch.equal(gen(x), gen(x))


def test_invalid_stage_rejected():
    gen = build_generator(GeneratorConfig.tiny(4))
    with pytest.raises(ValueError):
        gen.stage = "medium"


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(n_channels=1)
    with pytest.raises(ValueError):
        GeneratorConfig(n_downsample=0)
