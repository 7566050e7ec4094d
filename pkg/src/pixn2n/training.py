"""Two-stage adversarial training with per-sample random gates.

Each iteration draws one gate per training sample, forms the gated input
X and the missing-channel target Y, then takes one discriminator step and
one generator step. The coarse stage trains the global network on
2x average-pooled tiles; the fine stage trains the full coarse-to-fine
model at patch resolution.
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from pixn2n.checkpoint import (
    Checkpoint,
    checkpoint_path,
    load_checkpoint,
    payload_registry,
    payload_stats,
    restore_generator,
    save_checkpoint,
)
from pixn2n.dataset import MarkerRegistry
from pixn2n.discriminator import DiscriminatorConfig, build_discriminators
from pixn2n.evaluation import SsimParams, evaluate_scenario
from pixn2n.gating import GatePolicy, gate_batch_masks, iter_missing_scenarios, sample_gate
from pixn2n.generator import GeneratorConfig, build_generator
from pixn2n.losses import LossConfig, discriminator_objective, generator_objective
from pixn2n.utils import config_hash, read_jsonl

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    epochs: int = 200
    checkpoint_every: int = 10
    coarse_epochs: int | None = None  # default: first half of the run
    coarse_batch: int = 4
    fine_batch: int = 1
    coarse_resolution: int | None = 512
    fine_resolution: int | None = 1024
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    decay_epochs: int | None = None  # default: second half of the run
    lambda_fm: float = 10.0
    gate_policy: dict = field(default_factory=lambda: {"max_closed": 10, "always_closed": []})
    generator: dict = field(default_factory=lambda: GeneratorConfig().to_dict())
    discriminator: dict = field(default_factory=lambda: DiscriminatorConfig().to_dict())
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.coarse_epochs is None:
            self.coarse_epochs = self.epochs // 2
        if self.decay_epochs is None:
            self.decay_epochs = self.epochs // 2
        if not 0 <= self.coarse_epochs <= self.epochs:
            raise ValueError("coarse_epochs must lie in [0, epochs]")
        if not 0 <= self.decay_epochs <= self.epochs:
            raise ValueError("decay_epochs must lie in [0, epochs]")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, n_channels=4, **kw):
        """Reduced preset: tiny networks, 64 px patches, short schedule."""
        base = {
            "epochs": 20, "checkpoint_every": 10, "coarse_batch": 4, "fine_batch": 2,
            "coarse_resolution": None, "fine_resolution": None,
            "gate_policy": {"max_closed": n_channels - 1, "always_closed": []},
            "generator": GeneratorConfig.tiny(n_channels).to_dict(),
            "discriminator": DiscriminatorConfig.tiny(n_channels).to_dict(),
        }
        return cls(**(base | kw))

    @property
    def hash(self):
        return config_hash(self.to_dict())

    def policy(self):
        return GatePolicy.from_dict(self.gate_policy)

    def stage_for(self, epoch):
        return "coarse_only" if epoch <= self.coarse_epochs else "full"

    def lr_for(self, epoch):
        """Constant, then linear decay across the last ``decay_epochs`` epochs."""
        start = self.epochs - self.decay_epochs
        if epoch <= start:
            return self.lr
        return self.lr * (self.epochs - epoch + 1) / (self.decay_epochs + 1)

    def checkpoint_epochs(self):
        eps = [e for e in range(1, self.epochs + 1) if e % self.checkpoint_every == 0]
        if not eps or eps[-1] != self.epochs:
            eps.append(self.epochs)
        return eps


def set_deterministic(flag=True):
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


def _as_array(data):
    if hasattr(data, "array"):
        return data.array("train")
    return np.asarray(data, dtype=np.float32)


class Trainer:
    """Owns the mutable generator, discriminators, optimizers and RNG state."""

    def __init__(self, cfg, data, out_dir, registry=None, stats=None, store_hash=None,
                 gen=None, discs=None, dtype=torch.float32):
        self.cfg = cfg
        self.data = _as_array(data)
        if self.data.ndim != 4 or len(self.data) == 0:
            raise ValueError("training data must be a non-empty (B, N, P, P) array")
        self.out_dir = Path(out_dir)
        self.dtype = dtype
        n = self.data.shape[1]
        gcfg = GeneratorConfig.from_dict(cfg.generator)
        dcfg = DiscriminatorConfig.from_dict(cfg.discriminator)
        if gcfg.n_channels != n or dcfg.n_channels != n:
            raise ValueError(
                f"data has {n} channels but the model is configured for "
                f"{gcfg.n_channels} (G) / {dcfg.n_channels} (D)"
            )
        self.registry = registry or MarkerRegistry(tuple(f"ch{i}" for i in range(n)))
        self.stats = stats
        self.store_hash = store_hash
        self.policy = cfg.policy().check(n)
        self.loss_cfg = LossConfig(cfg.lambda_fm)

        self.gen = gen if gen is not None else build_generator(gcfg, cfg.seed, dtype=dtype)
        self.discs = discs if discs is not None else build_discriminators(dcfg, cfg.seed + 1, dtype=dtype)
        self._check_resolution()
        self.opt_g = torch.optim.Adam(self.gen.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.opt_d = torch.optim.Adam(self.discs.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.iteration = 0
        self.log = []

    def _check_resolution(self):
        P = self.data.shape[-1]
        if self.data.shape[-2] != P:
            raise ValueError("training patches must be square")
        if P % self.gen.divisor:
            raise ValueError(f"patch size {P} is not divisible by {self.gen.divisor}")
        if self.cfg.fine_resolution is not None and self.cfg.fine_resolution != P:
            raise ValueError(f"fine_resolution={self.cfg.fine_resolution} but patches are {P}px")
        if self.cfg.coarse_resolution is not None and self.cfg.coarse_resolution != P // 2:
            raise ValueError(f"coarse_resolution={self.cfg.coarse_resolution} but coarse tiles are {P // 2}px")

    @property
    def log_path(self):
        return self.out_dir / "train_log.jsonl"

    # ------------------------------------------------------------------
    def step(self, batch, gates, stage):
        M = torch.as_tensor(batch, dtype=self.dtype)
        if stage == "coarse_only":
            M = F.avg_pool2d(M, 2)
        open_mask = torch.as_tensor(gate_batch_masks(gates), dtype=self.dtype)
        X = M * open_mask
        Y_real = M * (1 - open_mask)
        out = self.gen.coarse(X) if stage == "coarse_only" else self.gen(X)
        Y_fake = out * (1 - open_mask)

        d_loss = discriminator_objective(self.discs, X, Y_real, Y_fake.detach())
        self._check_finite(d_loss, "discriminator", batch, gates)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        g = generator_objective(self.discs, Y_fake, X, Y_real, self.loss_cfg)
        self._check_finite(g.total, "generator", batch, gates)
        self.opt_g.zero_grad(set_to_none=True)
        g.total.backward()
        self.opt_g.step()
        return {
            "g_loss": g.total.item(), "d_loss": d_loss.item(),
            "adv_loss": g.adversarial.item(), "fm_loss": g.feature_matching.item(),
        }

    def _check_finite(self, loss, which, batch, gates):
        if torch.isfinite(loss).all():
            return
        dump = self.out_dir / "nonfinite_dump.pt"
        dump.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"epoch": self.epoch, "iteration": self.iteration + 1, "which": which,
                    "batch": torch.as_tensor(batch), "gates": [g.to_string() for g in gates]}, dump)
        raise NonFiniteLossError(
            f"non-finite {which} loss at epoch {self.epoch}, iteration {self.iteration + 1}, "
            f"gates {[g.to_string() for g in gates]}; batch dumped to {dump}",
            dump,
        )

    def run_epoch(self):
        self.epoch += 1
        stage = self.cfg.stage_for(self.epoch)
        self.gen.stage = stage
        lr = self.cfg.lr_for(self.epoch)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        bs = self.cfg.coarse_batch if stage == "coarse_only" else self.cfg.fine_batch
        n, n_ch = len(self.data), self.data.shape[1]
        order = self.rng.permutation(n)
        self.gen.train()
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            gates = [sample_gate(n_ch, self.policy, self.rng) for _ in idx]
            losses = self.step(self.data[idx], gates, stage)
            self.iteration += 1
            rec = {"iter": self.iteration, "epoch": self.epoch, "stage": stage, **losses,
                   "gate": [g.to_string() for g in gates]}
            self.log.append(rec)
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")

    def payload(self):
        return {
            "epoch": self.epoch,
            "iteration": self.iteration,
            "stage": self.cfg.stage_for(self.epoch),
            "train_config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash,
            "store_hash": self.store_hash,
            "generator_config": GeneratorConfig.from_dict(self.cfg.generator).to_dict(),
            "discriminator_config": DiscriminatorConfig.from_dict(self.cfg.discriminator).to_dict(),
            "generator": self.gen.state_dict(),
            "discriminator": self.discs.state_dict(),
            "optimizer_g": self.opt_g.state_dict(),
            "optimizer_d": self.opt_d.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "gate_policy": self.policy.to_dict(),
            "registry": list(self.registry.names),
            "stats": self.stats.to_dict() if self.stats is not None else None,
            "output_map": "(tanh + 1) / 2",
        }

    def save(self):
        path = checkpoint_path(self.out_dir, self.epoch)
        save_checkpoint(path, self.payload())
        return Checkpoint(self.epoch, path, self.cfg.hash)

    def fit(self):
        if self.cfg.deterministic:
            set_deterministic(True)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.epoch == 0 and self.log_path.exists():
            self.log_path.unlink()
        ckpt_epochs = set(self.cfg.checkpoint_epochs())
        saved = []
        while self.epoch < self.cfg.epochs:
            self.run_epoch()
            last = self.log[-1]
            logger.info("epoch %d/%d [%s] g=%.4f d=%.4f", self.epoch, self.cfg.epochs,
                        last["stage"], last["g_loss"], last["d_loss"])
            if self.epoch in ckpt_epochs:
                saved.append(self.save())
        return saved

    @classmethod
    def resume(cls, path, data, out_dir=None, expected_hash=None):
        payload = load_checkpoint(path, expected_hash)
        cfg = TrainConfig.from_dict(payload["train_config"])
        out_dir = Path(out_dir) if out_dir else Path(path).parent.parent
        dtype = next(iter(payload["generator"].values())).dtype
        t = cls(cfg, data, out_dir, payload_registry(payload), payload_stats(payload),
                payload.get("store_hash"), dtype=dtype)
        t.gen.load_state_dict(payload["generator"])
        t.discs.load_state_dict(payload["discriminator"])
        t.opt_g.load_state_dict(payload["optimizer_g"])
        t.opt_d.load_state_dict(payload["optimizer_d"])
        t.rng.bit_generator.state = payload["rng_state"]
        t.epoch = payload["epoch"]
        t.iteration = payload["iteration"]
        if t.log_path.exists():
            kept = [r for r in read_jsonl(t.log_path) if r["iter"] <= t.iteration]
            t.log_path.write_text("".join(json.dumps(r) + "\n" for r in kept))
            t.log = kept
        return t


def train(train_cfg, dataset, out_dir, gen=None, discs=None, registry=None, stats=None,
          store_hash=None):
    """Run the full schedule; returns the emitted checkpoints in epoch order."""
    if hasattr(dataset, "registry"):
        registry = registry or dataset.registry
        stats = stats or dataset.stats
        store_hash = store_hash or dataset.config_hash
    trainer = Trainer(train_cfg, dataset, out_dir, registry, stats, store_hash, gen, discs)
    return trainer.fit()


def select_best_checkpoint(checkpoints, val_set, gates=None, params=SsimParams()):
    """Highest mean validation SSIM over the gate set (default: every single-missing gate).

    Ties go to the later epoch.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if len(checkpoints) == 1:
        return checkpoints[0]
    val = val_set.load("val") if hasattr(val_set, "load") else val_set
    if len(val) == 0:
        raise ValueError("validation set is empty")
    best, best_score = None, -math.inf
    for ck in sorted(checkpoints, key=lambda c: c.epoch):
        gen = restore_generator(ck.load()) if isinstance(ck, Checkpoint) else ck.generator
        n = gen.config.n_channels
        scores = []
        for g in gates or iter_missing_scenarios(n, 1):
            scores += [r["ssim"] for r in evaluate_scenario(gen, val, g, params=params).rows]
        score = math.fsum(scores) / len(scores)
        logger.info("epoch %d: validation SSIM %.4f", ck.epoch, score)
        if score >= best_score:
            best, best_score = ck, score
    return best
