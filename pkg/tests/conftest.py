import numpy as np
import pytest
import torch
import torch.nn as nn

from pixn2n.dataset import PrepareConfig, prepare_dataset
from pixn2n.phantom import PhantomSpec, write_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def phantom_store(tmp_path_factory):
    """Small 4-channel phantom prepared into 64 px patches (shared, read-only)."""
    root = tmp_path_factory.mktemp("phantom")
    spec = PhantomSpec(n_channels=4, size=128, n_samples=6, seed=3, texture_amplitude=0.005)
    manifest = write_phantom(spec, root / "raw")
    return prepare_dataset(manifest, root / "store", PrepareConfig(patch_size=64, n_test=2, seed=0))


def prenorm_biases(module):
    """Conv biases immediately followed by an instance norm: the norm removes them,
    so their true gradient is exactly zero."""
    out = []
    for seq in module.modules():
        if isinstance(seq, nn.Sequential):
            kids = list(seq)
            for a, b in zip(kids, kids[1:]):
                if isinstance(a, nn.Conv2d | nn.ConvTranspose2d) and isinstance(b, nn.InstanceNorm2d) \
                        and a.bias is not None:
                    out.append(a.bias)
    return out


def finite_difference_check(loss_fn, params, n_entries=12, eps=1e-6, seed=0, absolute=False):
    """Compare autograd gradients with central differences on sampled parameter entries.

    Returns the worst relative error (worst absolute error with ``absolute=True``).
    ``loss_fn`` must rebuild its graph on each call.
    """
    gen = torch.Generator().manual_seed(seed)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            picks = torch.randperm(flat.numel(), generator=gen)[:n_entries]
            for idx in picks.tolist():
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
                numeric = (up - down) / (2 * eps)
                a = g.view(-1)[idx].item()
                denom = 1.0 if absolute else max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, abs(a - numeric) / denom)
    return worst


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)
