"""Command-line entry point: ``pixn2n {phantom,prepare,train,select,synth,eval,compare}``.

Exit codes: 0 success, 2 validation error, 3 runtime abort (non-finite loss).
Relative input paths that do not exist are retried under ``$PIXN2N_DATA_ROOT``.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from pixn2n.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    payload_registry,
    payload_stats,
    restore_generator,
)
from pixn2n.dataset import (
    PatchStore,
    PrepareConfig,
    PrepareError,
    apply_linear_range,
    coverage_mask,
    load_samples,
    manifest_samples,
    prepare_dataset,
    read_manifest,
    write_image16,
)
from pixn2n.evaluation import (
    SsimReport,
    paired_wilcoxon_by_marker,
    run_missing_multi_matrix,
    run_missing_one_matrix,
)
from pixn2n.gating import GateVector, apply_input_gate, apply_output_gate, invert
from pixn2n.generator import synthesize
from pixn2n.phantom import PhantomSpec, write_phantom
from pixn2n.training import (
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    select_best_checkpoint,
)
from pixn2n.utils import atomic_write_text, config_hash

logger = logging.getLogger("pixn2n")

DATA_ROOT_ENV = "PIXN2N_DATA_ROOT"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def resolve(path):
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and not p.exists() and root:
        return Path(root) / p
    return p


def load_config_file(path):
    if path is None:
        return {}
    data = yaml.safe_load(resolve(path).read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must contain a mapping")
    return data


def configure_threads(args):
    workers = 1 if getattr(args, "deterministic", False) else max(1, args.workers)
    torch.set_num_threads(workers)
    return workers


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_phantom(args):
    spec = PhantomSpec(n_channels=args.channels, size=args.size, n_samples=args.samples,
                       seed=args.seed, texture_amplitude=args.texture, footprint=args.footprint)
    manifest = write_phantom(spec, args.out)
    print(manifest)
    return EXIT_OK


def prepare_config_from(args):
    merged = PrepareConfig().to_dict() | load_config_file(args.config)
    overrides = {
        "patch_size": args.patch_size, "threshold": args.threshold,
        "train_fraction": args.train_fraction, "seed": args.seed, "n_test": args.n_test,
        "test_samples": args.test_samples.split(",") if args.test_samples else None,
    }
    merged |= {k: v for k, v in overrides.items() if v is not None}
    unknown = set(merged) - set(PrepareConfig().to_dict())
    if unknown:
        raise UsageError(f"unknown prepare config keys: {sorted(unknown)}")
    return PrepareConfig(**merged)


def cmd_prepare(args):
    cfg = prepare_config_from(args)
    workers = configure_threads(args)
    store = prepare_dataset(resolve(args.manifest), args.out, cfg, workers=workers)
    counts = {s: len(store.rows(s)) for s in ("train", "val", "test")}
    print(json.dumps({"store": str(store.root), "config_hash": store.config_hash, **counts}))
    return EXIT_OK


def train_config_from(args, n_channels):
    file_cfg = load_config_file(args.config)
    preset = file_cfg.pop("preset", args.preset)
    base = (TrainConfig.desk(n_channels) if preset == "desk" else TrainConfig()).to_dict()
    if preset != "desk":
        base["generator"]["n_channels"] = n_channels
        base["discriminator"]["n_channels"] = n_channels
        base["gate_policy"]["max_closed"] = min(base["gate_policy"]["max_closed"], n_channels - 1)
    merged = base
    for key, value in file_cfg.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merged[key] | value
        else:
            merged[key] = value
    if args.epochs is not None:
        merged["epochs"] = args.epochs
        for k in ("coarse_epochs", "decay_epochs"):
            if k not in file_cfg:
                merged[k] = None
    if args.seed is not None:
        merged["seed"] = args.seed
    if args.deterministic:
        merged["deterministic"] = True
    return TrainConfig.from_dict(merged)


def cmd_train(args):
    configure_threads(args)
    store = PatchStore(resolve(args.store))
    if args.resume:
        trainer = Trainer.resume(args.resume, store, args.out)
        if trainer.store_hash and trainer.store_hash != store.config_hash:
            raise CheckpointError("checkpoint was trained on a different patch store")
    else:
        cfg = train_config_from(args, len(store.registry))
        trainer = Trainer(cfg, store, args.out, store.registry, store.stats, store.config_hash)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_cfg = trainer.cfg.to_dict()
    atomic_write_text(out / "train_config.json",
                      json.dumps({"config": run_cfg, "config_hash": trainer.cfg.hash,
                                  "store_hash": store.config_hash}, indent=2))
    checkpoints = trainer.fit()
    print(json.dumps({"config_hash": trainer.cfg.hash,
                      "checkpoints": [str(c.path) for c in checkpoints]}))
    return EXIT_OK


def _checkpoints_in(run_dir):
    paths = sorted((Path(run_dir) / "ckpt").glob("epoch_*.bin"),
                   key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise UsageError(f"no checkpoints under {run_dir}/ckpt")
    out = []
    for p in paths:
        payload = load_checkpoint(p)
        out.append(Checkpoint(payload["epoch"], p, payload["config_hash"]))
    return out


def cmd_select(args):
    configure_threads(args)
    store = PatchStore(resolve(args.store))
    best = select_best_checkpoint(_checkpoints_in(args.run), store)
    result = {"epoch": best.epoch, "path": str(best.path), "config_hash": best.config_hash}
    atomic_write_text(Path(args.run) / "best_checkpoint.json", json.dumps(result, indent=2))
    print(json.dumps(result))
    return EXIT_OK


def synthesize_sample(gen, planes, gate, stats):
    """Synthesize the missing channels of one raw sample.

    ``planes`` maps channel index -> raw plane for the available channels.
    Returns ``(outputs, mask)`` where outputs maps missing channel -> [0, 1] plane.
    """
    n = gen.config.n_channels
    shape = next(iter(planes.values())).shape
    mask = coverage_mask([planes[i] for i in gate.open_channels]).bits.astype(np.float64)
    stack = np.zeros((n,) + shape)
    for i in gate.open_channels:
        stack[i] = apply_linear_range(planes[i], stats.lo[i], stats.hi[i]) * mask
    d = gen.divisor
    H, W = shape
    ph, pw = (-H) % d, (-W) % d
    x = np.pad(apply_input_gate(stack, gate), ((0, 0), (0, ph), (0, pw)))
    y = synthesize(gen, x.astype(np.float32))[:, :H, :W]
    y = apply_output_gate(y, invert(gate)) * mask
    return {j: y[j] for j in gate.missing_channels}, mask


def cmd_synth(args):
    configure_threads(args)
    payload = load_checkpoint(resolve(args.checkpoint))
    gen = restore_generator(payload)
    registry = payload_registry(payload)
    stats = payload_stats(payload)
    if stats is None:
        raise UsageError("checkpoint carries no normalization statistics")
    if not args.gate:
        raise UsageError("--gate is required")
    gate = GateVector.from_string(args.gate)
    if len(gate) != len(registry):
        raise UsageError(f"gate {args.gate} has {len(gate)} bits, model has {len(registry)} channels")
    if not gate.missing_channels:
        raise UsageError("gate has no missing channels: nothing to synthesize")
    if not gate.open_channels:
        raise UsageError("gate has no available channels")
    input_dir = resolve(args.input_dir)
    rows = read_manifest(input_dir / "manifest.jsonl")
    open_markers = [registry.names[i] for i in gate.open_channels]
    planes, failures = load_samples(rows, registry, markers=open_markers)
    if failures:
        raise PrepareError("failed to load input images:", failures)
    out = Path(args.out)
    written = []
    for sid in manifest_samples(rows):
        by_index = {registry.index(m): planes[sid][m] for m in open_markers}
        outputs, _ = synthesize_sample(gen, by_index, gate, stats)
        for j, plane in outputs.items():
            path = out / registry.names[j] / f"{sid}.png"
            write_image16(path, plane)
            written.append({"sample_id": sid, "marker": registry.names[j],
                            "path": str(path.relative_to(out))})
    atomic_write_text(out / "synth.json", json.dumps({
        "gate": gate.to_string(), "checkpoint_epoch": payload["epoch"],
        "config_hash": payload["config_hash"], "outputs": written}, indent=2))
    print(json.dumps({"outputs": len(written)}))
    return EXIT_OK


def cmd_eval(args):
    configure_threads(args)
    payload = load_checkpoint(resolve(args.checkpoint))
    store = PatchStore(resolve(args.store))
    if payload.get("store_hash") and payload["store_hash"] != store.config_hash and not args.allow_mismatch:
        raise CheckpointError(
            f"checkpoint store hash {payload['store_hash']} != store {store.config_hash} "
            "(pass --allow-mismatch to override)"
        )
    gen = restore_generator(payload)
    test = store.load(args.split)
    if not test:
        raise UsageError(f"split {args.split!r} of {store.root} is empty")
    seed = args.seed if args.seed is not None else 0
    header = {"config_hash": payload["config_hash"], "store_hash": store.config_hash,
              "checkpoint_epoch": payload["epoch"], "checkpoint": str(args.checkpoint),
              "seed": seed, "split": args.split}
    if args.scenario == "missing-one":
        report = run_missing_one_matrix(gen, test, store.registry, header=header)
    else:
        ms = [int(v) for v in args.m.split(",")] if args.m else list(range(2, len(store.registry)))
        report = run_missing_multi_matrix(gen, test, ms, store.registry, seed=seed, header=header,
                                          n_sampled=args.n_sampled)
    report.header["report_hash"] = config_hash(report.header)
    csv_path, json_path = report.write(args.out, args.scenario)
    print(json.dumps({"rows": len(report), "csv": str(csv_path), "summary": str(json_path),
                      "mean_ssim": report.mean()}))
    return EXIT_OK


def cmd_compare(args):
    a = SsimReport.read_csv(resolve(args.report_a))
    b = SsimReport.read_csv(resolve(args.report_b))
    results = paired_wilcoxon_by_marker(a, b, alpha=args.alpha)
    text = json.dumps({"report_a": str(args.report_a), "report_b": str(args.report_b),
                       "alpha": args.alpha, "markers": results}, indent=2, default=str)
    if args.out:
        atomic_write_text(args.out, text)
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pixn2n", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML/JSON config file")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--deterministic", action="store_true",
                        help="single worker, deterministic kernels")
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("phantom", help="write a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--channels", type=int, default=4)
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--samples", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--texture", type=float, default=0.005)
    sp.add_argument("--footprint", action="store_true")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("prepare", help="mask, normalize, tile and split into a patch store")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--patch-size", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--train-fraction", type=float)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--test-samples", help="comma-separated sample ids held out for testing")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train the gated model")
    common(sp)
    sp.add_argument("--store", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--preset", choices=["full", "desk"], default="full")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("select", help="pick the best checkpoint on the validation split")
    sp.add_argument("--run", required=True)
    sp.add_argument("--store", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("synth", help="synthesize missing channels for raw samples")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input-dir", required=True)
    sp.add_argument("--gate", help="bit string, '1'=available '0'=missing, staining order")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("eval", help="SSIM scenario matrices on a patch store split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--store", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--scenario", default="missing-one", choices=["missing-one", "missing-multi"])
    sp.add_argument("--m", help="comma-separated missing counts for missing-multi")
    sp.add_argument("--n-sampled", type=int, default=64)
    sp.add_argument("--allow-mismatch", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare", help="per-marker Wilcoxon signed-rank between two reports")
    sp.add_argument("report_a")
    sp.add_argument("report_b")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
