import numpy as np
import pytest
import torch

from pixn2n.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    restore_discriminators,
    restore_generator,
    save_checkpoint,
)
from pixn2n.generator import GeneratorConfig, build_generator
from pixn2n.training import (
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    select_best_checkpoint,
    train,
)
from pixn2n.utils import read_jsonl


def test_default_schedule_checkpoints():
    cfg = TrainConfig()
    assert cfg.checkpoint_epochs() == list(range(10, 201, 10))
    assert len(cfg.checkpoint_epochs()) == 20
    assert cfg.coarse_epochs == 100 and cfg.decay_epochs == 100
    assert (cfg.coarse_batch, cfg.coarse_resolution, cfg.fine_batch, cfg.fine_resolution) == (4, 512, 1, 1024)


def test_final_epoch_always_checkpointed():
    assert TrainConfig(epochs=25, checkpoint_every=10).checkpoint_epochs() == [10, 20, 25]
    assert TrainConfig(epochs=1).checkpoint_epochs() == [1]


def test_learning_rate_schedule():
    cfg = TrainConfig(epochs=200)
    assert cfg.lr_for(1) == cfg.lr_for(100) == 2e-4
    assert cfg.lr_for(101) == pytest.approx(2e-4 * 100 / 101)
    assert cfg.lr_for(200) == pytest.approx(2e-4 / 101)
    assert all(cfg.lr_for(e + 1) < cfg.lr_for(e) for e in range(100, 200))


def test_stage_schedule():
    cfg = TrainConfig(epochs=200)
    assert cfg.stage_for(100) == "coarse_only" and cfg.stage_for(101) == "full"


def test_config_hash_stable_under_key_order():
    d = TrainConfig.desk(4).to_dict()
    shuffled = dict(reversed(list(d.items())))
    assert TrainConfig.from_dict(shuffled).hash == TrainConfig.from_dict(d).hash
    assert TrainConfig.desk(4, seed=1).hash != TrainConfig.desk(4).hash


def test_unknown_config_key_rejected():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochz": 3})


def _data(n=6, ch=4, size=32, seed=0):
    return np.random.default_rng(seed).uniform(0.05, 1, size=(n, ch, size, size)).astype(np.float32)


def test_one_epoch_losses_finite(tmp_path, phantom_store):
    cfg = TrainConfig.desk(4, epochs=1)
    cks = train(cfg, phantom_store, tmp_path)
    assert [c.epoch for c in cks] == [1]
    log = read_jsonl(tmp_path / "train_log.jsonl")
    assert log and all(np.isfinite([r["g_loss"], r["d_loss"], r["fm_loss"]]).all() for r in log)
    payload = load_checkpoint(cks[0].path)
    assert payload["store_hash"] == phantom_store.config_hash
    assert payload["stats"] == phantom_store.stats.to_dict()


def test_seeded_replay_identical(tmp_path):
    cfg = TrainConfig.desk(4, epochs=2, coarse_epochs=1)
    a = Trainer(cfg, _data(), tmp_path / "a")
    a.fit()
    b = Trainer(cfg, _data(), tmp_path / "b")
    b.fit()
    assert len(a.log) >= 5
    assert a.log[:5] == b.log[:5]
    assert a.log == b.log


def test_resume_matches_unbroken_run(tmp_path):
    cfg = TrainConfig.desk(4, epochs=4, checkpoint_every=2, coarse_epochs=1)
    full = Trainer(cfg, _data(), tmp_path / "full")
    full.fit()
    part = Trainer(cfg, _data(), tmp_path / "part")
    part.out_dir.mkdir(parents=True)
    part.run_epoch()
    part.run_epoch()
    ck = part.save()
    resumed = Trainer.resume(ck.path, _data(), tmp_path / "resumed")
    resumed.fit()
    tail = [r for r in full.log if r["epoch"] > 2]
    assert resumed.log == tail
    for p, q in zip(full.gen.parameters(), resumed.gen.parameters()):
        assert torch.equal(p, q)


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    cfg = TrainConfig.desk(4, epochs=2, coarse_epochs=1, checkpoint_every=1)
    t = Trainer(cfg, _data(), tmp_path)
    cks = t.fit()
    assert [c.epoch for c in cks] == [1, 2]
    assert cks[-1].path.name == "epoch_2.bin"
    payload = cks[-1].load()
    gen = restore_generator(payload)
    t.gen.eval()
    x = torch.as_tensor(_data(2, seed=5))
    with torch.no_grad():
        assert torch.equal(gen(x), t.gen(x))
    discs = restore_discriminators(payload)
    for p, q in zip(discs.parameters(), t.discs.parameters()):
        assert torch.equal(p, q)
    assert restore_generator(cks[0].load()).stage == "coarse_only"


def test_checkpoint_hash_checks(tmp_path):
    cfg = TrainConfig.desk(4, epochs=1)
    t = Trainer(cfg, _data(), tmp_path)
    ck = t.fit()[0]
    with pytest.raises(CheckpointError):
        load_checkpoint(ck.path, expected_hash="0" * 16)
    payload = load_checkpoint(ck.path)
    payload["train_config"]["epochs"] = 999
    save_checkpoint(tmp_path / "tampered.bin", payload)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "tampered.bin")
    (tmp_path / "junk.bin").write_bytes(b"junk")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.bin")


def test_nonfinite_loss_aborts_with_dump(tmp_path):
    data = _data()
    data[0, 0, 0, 0] = np.nan
    cfg = TrainConfig.desk(4, epochs=1, fine_batch=6)
    with pytest.raises(NonFiniteLossError) as info:
        Trainer(cfg, data, tmp_path).fit()
    dump = torch.load(info.value.dump_path)
    assert dump["gates"] and dump["batch"].shape[0] == 6


def test_arity_mismatch_rejected(tmp_path):
    with pytest.raises(ValueError):
        Trainer(TrainConfig.desk(3), _data(ch=4), tmp_path)


def test_indivisible_patches_rejected(tmp_path):
    with pytest.raises(ValueError):
        Trainer(TrainConfig.desk(4), _data(size=36), tmp_path)


def test_every_channel_exposed_as_missing(tmp_path, phantom_store):
    cfg = TrainConfig.desk(4, epochs=1, coarse_batch=1)
    t = Trainer(cfg, phantom_store, tmp_path)
    t.fit()
    missing = set()
    for r in t.log:
        for g in r["gate"]:
            missing |= {i for i, b in enumerate(g) if b == "0"}
    assert missing == {0, 1, 2, 3}


# --- best-checkpoint selection ----------------------------------------------


class _Held:
    """Stand-in for an in-memory checkpoint: an epoch plus a callable generator."""

    def __init__(self, epoch, fn, n=4):
        self.epoch = epoch
        self.generator = _Callable(fn, n)


class _Callable:
    def __init__(self, fn, n):
        self.fn = fn
        self.config = GeneratorConfig.tiny(n)

    def __call__(self, x):
        return self.fn(x)


def _copy_open_mean(x):
    # channels are identical in the validation set below, so the mean of the
    # open (non-zero) channels reproduces every closed one exactly
    open_ = (np.abs(x).sum(axis=(-2, -1), keepdims=True) > 0)
    mean = (x * open_).sum(axis=-3, keepdims=True) / open_.sum(axis=-3, keepdims=True)
    return np.broadcast_to(mean, x.shape).copy()


def _constant(x):
    return np.full_like(x, 0.5)


@pytest.fixture
def redundant_val():
    plane = np.random.default_rng(0).uniform(0.2, 0.8, size=(3, 1, 32, 32))
    return np.repeat(plane, 4, axis=1)


def test_select_single_checkpoint_unconditional():
    ck = Checkpoint(3, "unused", "h")
    assert select_best_checkpoint([ck], val_set=[]) is ck


def test_select_prefers_dominant_checkpoint(redundant_val):
    good, bad = _Held(10, _copy_open_mean), _Held(20, _constant)
    assert select_best_checkpoint([good, bad], redundant_val) is good
    assert select_best_checkpoint([bad, good], redundant_val) is good


def test_select_tie_goes_to_later_epoch(redundant_val):
    a, b = _Held(10, _constant), _Held(20, _constant)
    assert select_best_checkpoint([b, a], redundant_val) is b


def test_select_reads_saved_checkpoints(tmp_path):
    cfg = TrainConfig.desk(4, epochs=2, coarse_epochs=1, checkpoint_every=1)
    cks = Trainer(cfg, _data(), tmp_path).fit()
    best = select_best_checkpoint(cks, _data(2, seed=7))
    assert best in cks


def test_select_rejects_empty():
    with pytest.raises(ValueError):
        select_best_checkpoint([], [])
