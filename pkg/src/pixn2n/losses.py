"""Least-squares adversarial, feature-matching and combined objectives.

Reductions: mean over elements inside each map, plain sum over scales
and layers.
"""

import contextlib
from dataclasses import dataclass

import torch

REAL, FAKE = 1.0, 0.0


@dataclass
class LossConfig:
    lambda_fm: float = 10.0
    gan_mode: str = "lsgan"

    def __post_init__(self):
        if self.lambda_fm < 0:
            raise ValueError("lambda_fm must be non-negative")
        if self.gan_mode != "lsgan":
            raise ValueError(f"unsupported gan_mode {self.gan_mode!r}")


def adversarial_loss(prediction, target_label):
    return torch.mean((prediction - float(target_label)) ** 2)


def feature_matching_loss(real_features, fake_features):
    """Sum over scales and layers of the mean absolute feature difference.

    Accepts either per-scale lists of layer tensors or a flat list of layers.
    Real features are detached; gradients flow through the fake path only.
    """
    if len(real_features) != len(fake_features):
        raise ValueError("real and fake feature sets have different numbers of scales")
    total = 0.0
    for real, fake in zip(real_features, fake_features):
        if isinstance(real, (list, tuple)):
            total = total + feature_matching_loss(real, fake)
            continue
        if real.shape != fake.shape:
            raise ValueError(f"feature shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
        total = total + torch.mean(torch.abs(real.detach() - fake))
    return total


@contextlib.contextmanager
def frozen(module):
    """Temporarily stop gradients into ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


@dataclass
class GeneratorLoss:
    total: torch.Tensor
    adversarial: torch.Tensor
    feature_matching: torch.Tensor


def generator_objective(discs, gen_output_masked, X, Y_real, cfg=None, freeze_discriminators=True):
    """Sum over scales of LSGAN(fake scored as real) + lambda * feature matching.

    The discriminators are frozen while evaluating so this objective never
    produces gradients for their parameters.
    """
    cfg = cfg or LossConfig()
    ctx = frozen(discs) if freeze_discriminators else contextlib.nullcontext()
    with ctx:
        fake_out = discs(X, gen_output_masked)
        with torch.no_grad():
            real_out = discs(X, Y_real)
    adv = sum(adversarial_loss(o.prediction, REAL) for o in fake_out)
    fm = feature_matching_loss([o.features for o in real_out], [o.features for o in fake_out])
    return GeneratorLoss(adv + cfg.lambda_fm * fm, adv, fm)


def discriminator_objective(discs, X, Y_real, Y_fake_detached):
    real_out = discs(X, Y_real)
    fake_out = discs(X, Y_fake_detached.detach())
    return sum(
        (adversarial_loss(r.prediction, REAL) + adversarial_loss(f.prediction, FAKE)) / 2
        for r, f in zip(real_out, fake_out)
    )


def gan_loss_reference(d_real, d_fake, eps=1e-12):
    """Log-likelihood conditional GAN value E[log D(x,y)] + E[log(1 - D(x,G(x)))].

    Kept as the reference form of the objective; training uses the
    least-squares variant above.
    """
    return torch.mean(torch.log(d_real + eps)) + torch.mean(torch.log(1.0 - d_fake + eps))
