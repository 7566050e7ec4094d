"""Marker registry, image containers and the patch preparation pipeline.

On-disk input is a line-delimited JSON manifest with one record per
(sample, marker) pair::

    {"sample_id": "s01", "marker": "DAPI", "path": "DAPI/s01.png"}

Relative paths resolve against the manifest's directory. The prepared
patch store is a directory holding ``store.json`` (header: registry,
patch size, normalization statistics, config hash), ``index.jsonl`` (one
row per patch) and ``patches/<id>.npy`` (float32 array of shape (N, P, P)).
"""

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from pixn2n.utils import atomic_write_text, config_hash, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

DEFAULT_MARKERS = (
    "DAPI",
    "Muc2",
    "Collagen",
    "beta-catenin",
    "pEGFR",
    "HLA-A",
    "PanCK",
    "Na-KATPase",
    "Vimentin",
    "SMA",
    "gamma-Actin",
)

SPLITS = ("train", "val", "test")
STORE_FORMAT = 1


class PrepareError(ValueError):
    """Raised when input files cannot be turned into a patch store."""

    def __init__(self, message, failures=()):
        self.failures = list(failures)
        if self.failures:
            message += "\n" + "\n".join(f"  - {f}" for f in self.failures)
        super().__init__(message)


@dataclass(frozen=True)
class MarkerRegistry:
    """Ordered marker names; list order is the staining order."""

    names: tuple = DEFAULT_MARKERS

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate marker names in registry: {self.names}")
        if not self.names:
            raise ValueError("registry must contain at least one marker")

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name):
        return self.names.index(name)


@dataclass
class MultiChannelImage:
    planes: np.ndarray  # (N, H, W)
    registry: MarkerRegistry
    normalized: bool = False

    def __post_init__(self):
        self.planes = np.asarray(self.planes)
        if self.planes.ndim != 3:
            raise ValueError(f"planes must be (N, H, W), got shape {self.planes.shape}")
        if self.planes.shape[0] != len(self.registry):
            raise ValueError(
                f"plane count {self.planes.shape[0]} != registry length {len(self.registry)}"
            )
        if self.normalized and self.planes.size:
            lo, hi = float(self.planes.min()), float(self.planes.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"normalized image has values outside [0, 1]: [{lo}, {hi}]")

    @property
    def shape(self):
        return self.planes.shape

    def with_planes(self, planes, normalized=None):
        return MultiChannelImage(
            planes, self.registry, self.normalized if normalized is None else normalized
        )


@dataclass
class TissueMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("tissue mask values must be exactly 0 or 1")
        self.bits = bits.astype(np.uint8)


@dataclass
class PatchRecord:
    id: str
    origin: tuple
    tiles: np.ndarray  # (N, P, P)
    sample_id: str
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        self.origin = tuple(int(v) for v in self.origin)

    @property
    def size(self):
        return self.tiles.shape[-1]

    def index_row(self):
        return {
            "id": self.id,
            "origin": list(self.origin),
            "sample_id": self.sample_id,
            "split": self.split,
        }


# --------------------------------------------------------------------------
# core operations
# --------------------------------------------------------------------------


def compute_tissue_mask(per_round_coverage):
    """Pixel-wise intersection of binary coverage rasters."""
    rasters = [np.asarray(r) for r in per_round_coverage]
    if not rasters:
        raise ValueError("at least one coverage raster is required")
    shape = rasters[0].shape
    for i, r in enumerate(rasters):
        if r.shape != shape:
            raise ValueError(f"coverage raster {i} has shape {r.shape}, expected {shape}")
    bits = np.ones(shape, dtype=bool)
    for r in rasters:
        bits &= r.astype(bool)
    return TissueMask(bits.astype(np.uint8))


@dataclass(frozen=True)
class GroupStats:
    """Per-marker linear normalization range, fitted over a sample group."""

    lo: tuple
    hi: tuple

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d["lo"]), tuple(float(v) for v in d["hi"]))


def group_range(planes, masks=None):
    """Global (min, max) over the in-mask pixels of a group of planes."""
    lo, hi = math.inf, -math.inf
    for i, p in enumerate(planes):
        p = np.asarray(p, dtype=np.float64)
        if masks is not None:
            p = p[np.asarray(masks[i]).astype(bool)]
        if p.size:
            lo = min(lo, float(p.min()))
            hi = max(hi, float(p.max()))
    if lo == math.inf:
        # nothing in-mask anywhere; degenerate range
        return 0.0, 0.0
    return lo, hi


def apply_linear_range(plane, lo, hi):
    plane = np.asarray(plane, dtype=np.float64)
    if hi == lo:
        return np.zeros_like(plane)
    return np.clip((plane - lo) / (hi - lo), 0.0, 1.0)


def normalize_group(images_of_one_marker, masks=None):
    """Min-max normalize every plane of one marker using the group's global range.

    ``masks`` (one per plane) restricts the range estimate to tissue pixels.
    A constant group maps to all zeros.
    """
    planes = list(images_of_one_marker)
    if not planes:
        raise ValueError("normalize_group needs at least one plane")
    lo, hi = group_range(planes, masks)
    return [apply_linear_range(p, lo, hi) for p in planes]


def fit_group_stats(images, masks=None):
    """Fit per-marker ranges over a list of unnormalized MultiChannelImage."""
    if not images:
        raise ValueError("cannot fit normalization statistics on an empty group")
    n = len(images[0].registry)
    lo, hi = [], []
    for c in range(n):
        a, b = group_range([im.planes[c] for im in images], masks)
        lo.append(a)
        hi.append(b)
    return GroupStats(tuple(lo), tuple(hi))


def apply_group_stats(image, stats):
    planes = np.stack(
        [apply_linear_range(image.planes[c], stats.lo[c], stats.hi[c]) for c in range(image.shape[0])]
    )
    return image.with_planes(planes, normalized=True)


def extract_patches(image, mask, P, sample_id="sample", split="train"):
    """Non-overlapping P x P grid tiles from (0, 0); partial edge tiles are dropped."""
    if P < 8:
        raise ValueError(f"patch size must be >= 8, got {P}")
    if not image.normalized:
        raise ValueError("extract_patches expects a normalized image")
    bits = mask.bits if isinstance(mask, TissueMask) else np.asarray(mask)
    _, H, W = image.shape
    if bits.shape != (H, W):
        raise ValueError(f"mask shape {bits.shape} does not match image {(H, W)}")
    masked = image.planes * bits[None].astype(image.planes.dtype)
    patches = []
    for r in range(0, H - P + 1, P):
        for c in range(0, W - P + 1, P):
            tiles = np.ascontiguousarray(masked[:, r : r + P, c : c + P])
            patches.append(PatchRecord(f"{sample_id}_r{r}_c{c}", (r, c), tiles, sample_id, split))
    return patches


def nonzero_fractions(tiles):
    tiles = np.asarray(tiles)
    n_pix = tiles.shape[-1] * tiles.shape[-2]
    return np.count_nonzero(tiles.reshape(tiles.shape[0], -1), axis=1) / n_pix


def filter_patch(patch, threshold=0.05):
    """Keep unless some channel has strictly less than ``threshold`` non-zero pixels."""
    tiles = patch.tiles if isinstance(patch, PatchRecord) else patch
    return bool((nonzero_fractions(tiles) >= threshold).all())


def split_train_val(patches, train_fraction=0.8, seed=0):
    """Seeded shuffle; the first floor(f * n) become train, the rest val."""
    patches = list(patches)
    if not patches:
        raise ValueError("cannot split an empty patch list")
    n = len(patches)
    n_train = math.floor(train_fraction * n)
    order = np.random.default_rng(seed).permutation(n)
    train_ids = set(order[:n_train].tolist())
    return [
        dataclasses.replace(p, split="train" if i in train_ids else "val")
        for i, p in enumerate(patches)
    ]


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------


def read_image(path):
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel grayscale image, got shape {arr.shape}")
    return arr.astype(np.float64)


def write_image16(path, plane):
    """Write a [0, 1] plane as a 16-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = np.round(np.clip(plane, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise PrepareError(f"manifest not found: {path}")
    rows = read_jsonl(path)
    if not rows:
        raise PrepareError(f"manifest is empty: {path}")
    base = path.parent
    out = []
    for i, row in enumerate(rows):
        missing = {"sample_id", "marker", "path"} - set(row)
        if missing:
            raise PrepareError(f"manifest row {i} lacks fields {sorted(missing)}")
        p = Path(row["path"])
        out.append({"sample_id": str(row["sample_id"]), "marker": row["marker"],
                    "path": p if p.is_absolute() else base / p})
    return out


def manifest_registry(rows):
    seen = []
    for r in rows:
        if r["marker"] not in seen:
            seen.append(r["marker"])
    return MarkerRegistry(tuple(seen))


def manifest_samples(rows):
    seen = []
    for r in rows:
        if r["sample_id"] not in seen:
            seen.append(r["sample_id"])
    return seen


def load_samples(rows, registry, markers=None, workers=1):
    """Read raw planes for every sample in the manifest.

    Returns ``({sample_id: {marker: plane}}, failures)``. Only ``markers``
    (default: the whole registry) are required per sample.
    """
    markers = list(registry.names if markers is None else markers)
    by_sample = {}
    for r in rows:
        by_sample.setdefault(r["sample_id"], {})[r["marker"]] = r["path"]

    failures = []
    jobs = []
    for sid, paths in by_sample.items():
        for m in markers:
            if m not in paths:
                failures.append(f"{sid}: no manifest entry for marker {m!r}")
            else:
                jobs.append((sid, m, paths[m]))

    def _load(job):
        sid, m, p = job
        try:
            return sid, m, read_image(p), None
        except Exception as exc:  # itemized below
            return sid, m, None, f"{sid}/{m}: cannot read {p}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(_load, jobs))

    planes = {}
    for sid, m, arr, err in results:
        if err:
            failures.append(err)
        else:
            planes.setdefault(sid, {})[m] = arr
    for sid, d in planes.items():
        shapes = {a.shape for a in d.values()}
        if len(shapes) > 1:
            failures.append(f"{sid}: planes have mismatched shapes {sorted(shapes)}")
    return planes, failures


def coverage_mask(planes):
    """Tissue mask from raw planes: a pixel is covered where every plane is non-zero."""
    return compute_tissue_mask([np.asarray(p) > 0 for p in planes])


@dataclass
class PrepareConfig:
    patch_size: int = 1024
    threshold: float = 0.05
    train_fraction: float = 0.8
    seed: int = 0
    test_samples: list = field(default_factory=list)
    n_test: int | None = None

    def to_dict(self):
        return dataclasses.asdict(self)


def choose_test_samples(sample_ids, cfg):
    if cfg.test_samples:
        unknown = set(cfg.test_samples) - set(sample_ids)
        if unknown:
            raise PrepareError(f"test samples not in manifest: {sorted(unknown)}")
        return list(cfg.test_samples)
    n = len(sample_ids)
    n_test = cfg.n_test if cfg.n_test is not None else (round(n * 5 / 9) if n > 1 else 0)
    if n_test >= n:
        raise PrepareError(f"n_test={n_test} leaves no training samples out of {n}")
    rng = np.random.default_rng(cfg.seed)
    picked = rng.choice(n, size=n_test, replace=False) if n_test else []
    return [sample_ids[i] for i in sorted(int(i) for i in picked)]


def prepare_dataset(manifest, out_dir, cfg=None, registry=None, workers=1):
    """Full preparation: mask, normalize, tile, filter, split, write the store.

    Normalization statistics are fitted on the train/val samples only and
    reused for test samples (and persisted for inference).
    """
    cfg = cfg or PrepareConfig()
    rows = read_manifest(manifest)
    registry = registry or manifest_registry(rows)
    sample_ids = manifest_samples(rows)
    planes, failures = load_samples(rows, registry, workers=workers)
    if failures:
        raise PrepareError("failed to load input images:", failures)

    test_ids = set(choose_test_samples(sample_ids, cfg))
    pool_ids = [s for s in sample_ids if s not in test_ids]

    raw, masks = {}, {}
    for sid in sample_ids:
        stack = np.stack([planes[sid][m] for m in registry.names])
        raw[sid] = MultiChannelImage(stack, registry)
        masks[sid] = coverage_mask(stack)

    stats = fit_group_stats([raw[s] for s in pool_ids], [masks[s].bits for s in pool_ids])

    pool_patches, test_patches = [], []
    dropped = 0
    for sid in sample_ids:
        norm = apply_group_stats(raw[sid], stats)
        split = "test" if sid in test_ids else "train"
        for p in extract_patches(norm, masks[sid], cfg.patch_size, sid, split):
            if filter_patch(p, cfg.threshold):
                (test_patches if split == "test" else pool_patches).append(p)
            else:
                dropped += 1
    if pool_patches:
        pool_patches = split_train_val(pool_patches, cfg.train_fraction, cfg.seed)
    patches = pool_patches + test_patches
    logger.info("prepared %d patches (%d dropped by the non-zero filter)", len(patches), dropped)

    header = {
        "format": STORE_FORMAT,
        "registry": list(registry.names),
        "patch_size": cfg.patch_size,
        "prepare_config": cfg.to_dict(),
        "stats": stats.to_dict(),
        "test_samples": sorted(test_ids),
    }
    header["config_hash"] = config_hash({k: header[k] for k in ("registry", "prepare_config")})
    write_patch_store(out_dir, patches, header)
    return PatchStore(out_dir)


def write_patch_store(out_dir, patches, header):
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    for p in patches:
        np.save(out / "patches" / f"{p.id}.npy", p.tiles.astype(np.float32))
    write_jsonl(out / "index.jsonl", [p.index_row() for p in patches])
    atomic_write_text(out / "store.json", json.dumps(header, indent=2, sort_keys=True))


class PatchStore:
    """Read access to a prepared patch directory."""

    def __init__(self, root):
        self.root = Path(root)
        store_file = self.root / "store.json"
        if not store_file.exists():
            raise FileNotFoundError(f"not a patch store (missing store.json): {self.root}")
        self.header = json.loads(store_file.read_text())
        self.index = read_jsonl(self.root / "index.jsonl")
        self.registry = MarkerRegistry(tuple(self.header["registry"]))
        self.stats = GroupStats.from_dict(self.header["stats"])

    @property
    def config_hash(self):
        return self.header["config_hash"]

    def rows(self, split=None):
        return [r for r in self.index if split is None or r["split"] == split]

    def load(self, split=None):
        return [
            PatchRecord(
                r["id"], tuple(r["origin"]),
                np.load(self.root / "patches" / f"{r['id']}.npy"),
                r["sample_id"], r["split"],
            )
            for r in self.rows(split)
        ]

    def array(self, split=None):
        """All patches of a split stacked into one (B, N, P, P) float32 array."""
        patches = self.load(split)
        if not patches:
            n, p = len(self.registry), self.header["patch_size"]
            return np.zeros((0, n, p, p), dtype=np.float32)
        return np.stack([p.tiles for p in patches]).astype(np.float32)
