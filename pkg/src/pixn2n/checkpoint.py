"""Checkpoint container: versioned header + generator/discriminator namespaces."""

import io
from dataclasses import dataclass
from pathlib import Path

import torch

from pixn2n.dataset import GroupStats, MarkerRegistry
from pixn2n.discriminator import DiscriminatorConfig, MultiscaleDiscriminator
from pixn2n.generator import Generator, GeneratorConfig
from pixn2n.utils import atomic_write_bytes, config_hash

MAGIC = "pixn2n-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    epoch: int
    path: Path
    config_hash: str

    def load(self, expected_hash=None):
        return load_checkpoint(self.path, expected_hash or self.config_hash)


def checkpoint_path(out_dir, epoch):
    return Path(out_dir) / "ckpt" / f"epoch_{epoch}.bin"


def save_checkpoint(path, payload):
    payload = {"magic": MAGIC, "format_version": FORMAT_VERSION} | payload
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def load_checkpoint(path, expected_hash=None):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise CheckpointError(f"{path} is not a pixn2n checkpoint")
    if payload["format_version"] > FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {payload['format_version']}, "
            f"this build reads up to {FORMAT_VERSION}"
        )
    recomputed = config_hash(payload["train_config"])
    if recomputed != payload["config_hash"]:
        raise CheckpointError(f"{path}: stored config hash does not match its embedded config")
    if expected_hash is not None and expected_hash != payload["config_hash"]:
        raise CheckpointError(
            f"{path}: config hash {payload['config_hash']} != expected {expected_hash}"
        )
    return payload


def restore_generator(payload, stage=None):
    gen = Generator(GeneratorConfig.from_dict(payload["generator_config"]),
                    stage or payload.get("stage", "full"))
    state = payload["generator"]
    gen.to(next(iter(state.values())).dtype)
    gen.load_state_dict(state)
    gen.eval()
    return gen


def restore_discriminators(payload):
    discs = MultiscaleDiscriminator(DiscriminatorConfig.from_dict(payload["discriminator_config"]))
    state = payload["discriminator"]
    discs.to(next(iter(state.values())).dtype)
    discs.load_state_dict(state)
    return discs


def payload_registry(payload):
    return MarkerRegistry(tuple(payload["registry"]))


def payload_stats(payload):
    stats = payload.get("stats")
    return GroupStats.from_dict(stats) if stats else None
