"""SSIM scoring, scenario matrices, reports and the Wilcoxon signed-rank test."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats as sps

from pixn2n.dataset import MarkerRegistry, PatchRecord
from pixn2n.gating import GateVector, apply_input_gate, iter_missing_scenarios
from pixn2n.utils import atomic_write_text


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self):
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.data_range) ** 2

    def kernel_1d(self):
        x = np.arange(self.window, dtype=np.float64) - (self.window - 1) / 2
        g = np.exp(-(x**2) / (2 * self.sigma**2))
        return g / g.sum()


def _filter_valid(img, g):
    out = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(out, g.size, axis=1) @ g


def ssim_map(a, b, params=SsimParams()):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects single-channel 2-D rasters")
    if min(a.shape) < params.window:
        raise ValueError(f"rasters smaller than the {params.window}x{params.window} window")
    g = params.kernel_1d()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, params=SsimParams()):
    """Mean of the Gaussian-windowed local SSIM map (valid region only)."""
    return float(np.mean(ssim_map(a, b, params)))


# --------------------------------------------------------------------------
# Wilcoxon signed-rank
# --------------------------------------------------------------------------


class DegenerateTestError(ValueError):
    """All paired differences are zero; the test is undefined."""


@dataclass
class WilcoxonResult:
    statistic: float
    pvalue: float
    w_plus: float
    w_minus: float
    n: int
    method: str

    def to_dict(self):
        return dict(self.__dict__)


def _exact_lower_tail(ranks, w):
    """P(W+ <= w) under random signs, by counting subset sums of doubled ranks."""
    doubled = [int(round(2 * r)) for r in ranks]
    counts = np.zeros(sum(doubled) + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        counts[r:] = counts[r:] + counts[: counts.size - r].copy()
    limit = int(math.floor(2 * w + 1e-9))
    return float(sum(counts[: limit + 1])) / 2 ** len(ranks)


def wilcoxon_signed_rank(paired_a, paired_b, exact_max_n=12, min_n=5):
    """Two-sided Wilcoxon signed-rank test with zero-dropping and midranks.

    Exact null distribution for n <= ``exact_max_n``; otherwise the normal
    approximation with the tie-corrected variance.
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and the same length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    if n < min_n:
        raise ValueError(f"need at least {min_n} non-zero differences, got {n}")
    ranks = sps.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_max_n:
        p = min(1.0, 2.0 * _exact_lower_tail(ranks, w))
        method = "exact"
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        z = (w - mean) / math.sqrt(var)
        p = min(1.0, 2.0 * float(sps.norm.cdf(z)))
        method = "normal"
    return WilcoxonResult(w, p, w_plus, w_minus, n, method)


# --------------------------------------------------------------------------
# scenario evaluation
# --------------------------------------------------------------------------


@dataclass
class SsimReport:
    rows: list = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def extend(self, other):
        self.rows.extend(other.rows)
        return self

    def means_by(self, *keys):
        groups = {}
        for r in self.rows:
            groups.setdefault(tuple(r[k] for k in keys), []).append(r["ssim"])
        return {k if len(keys) > 1 else k[0]: math.fsum(v) / len(v) for k, v in groups.items()}

    def marker_means(self):
        return self.means_by("marker")

    def mean(self):
        return math.fsum(r["ssim"] for r in self.rows) / len(self.rows) if self.rows else math.nan

    def to_csv(self, path):
        cols = ["m", "gate", "marker", "channel", "sample_id", "patch_id", "ssim"]
        cols = [c for c in cols if any(c in r for r in self.rows)] or cols
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(_csv_cell(r.get(c, "")) for c in cols))
        atomic_write_text(path, "\n".join(lines) + "\n")

    def summary(self):
        out = {"header": self.header, "n_rows": len(self.rows), "mean_ssim": self.mean(),
               "marker_means": self.marker_means()}
        if any("m" in r for r in self.rows):
            out["m_marker_means"] = [
                {"m": m, "marker": mk, "mean_ssim": v}
                for (m, mk), v in sorted(self.means_by("m", "marker").items())
            ]
        return out

    def write(self, out_dir, stem="report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.to_csv(out / f"{stem}.csv")
        atomic_write_text(out / f"{stem}.json", json.dumps(self.summary(), indent=2, default=str))
        return out / f"{stem}.csv", out / f"{stem}.json"

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            r["ssim"] = float(r["ssim"])
            if "channel" in r:
                r["channel"] = int(r["channel"])
            if r.get("m", "") != "":
                r["m"] = int(r["m"])
        return cls(rows)


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def as_patch_list(test_set):
    if isinstance(test_set, np.ndarray):
        return [PatchRecord(f"patch{i}", (0, 0), t, f"sample{i}", "test") for i, t in enumerate(test_set)]
    return list(test_set)


def predictor(model):
    """Turn a generator module or a plain callable into array -> array prediction."""
    if isinstance(model, torch.nn.Module):
        param = next(model.parameters())

        def _predict(x):
            with torch.no_grad():
                return model(torch.as_tensor(x, dtype=param.dtype)).cpu().numpy()

        return _predict
    return model


def _arity(model):
    cfg = getattr(model, "config", None)
    return getattr(cfg, "n_channels", None)


def evaluate_scenario(model, test_set, gate, registry=None, params=SsimParams(), batch_size=8):
    """One row per (patch, missing channel) comparing synthesis with ground truth."""
    patches = as_patch_list(test_set)
    if not patches:
        return SsimReport()
    n = patches[0].tiles.shape[0]
    registry = registry or MarkerRegistry(tuple(f"ch{i}" for i in range(n)))
    arity = _arity(model)
    if arity is not None and arity != len(gate):
        raise ValueError(f"gate length {len(gate)} does not match model arity {arity}")
    gate.validate(n)
    predict = predictor(model)
    rows = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start : start + batch_size]
        truth = np.stack([p.tiles for p in chunk]).astype(np.float32)
        pred = np.asarray(predict(apply_input_gate(truth, gate)))
        for p, t, y in zip(chunk, truth, pred):
            for j in gate.missing_channels:
                rows.append({
                    "gate": gate.to_string(),
                    "marker": registry.names[j],
                    "channel": j,
                    "sample_id": p.sample_id,
                    "patch_id": p.id,
                    "ssim": ssim(y[j], t[j], params),
                })
    return SsimReport(rows)


def run_gates(model, test_set, gates, registry=None, params=SsimParams(), header=None):
    report = SsimReport(header=dict(header or {}))
    for g in gates:
        report.extend(evaluate_scenario(model, test_set, g, registry, params))
    report.header.setdefault("gates", [g.to_string() for g in gates])
    return report


def run_missing_one_matrix(model, test_set, registry=None, params=SsimParams(), header=None):
    n = as_patch_list(test_set)[0].tiles.shape[0]
    gates = list(iter_missing_scenarios(n, 1))
    report = run_gates(model, test_set, gates, registry, params, header)
    report.header["scenario"] = "missing-one"
    return report


def scenario_gates(n, m, max_enumerate=64, n_sampled=64, seed=0):
    """All gates with exactly m missing if there are at most ``max_enumerate``, else a seeded sample."""
    if not 1 <= m <= n - 1:
        raise ValueError(f"number of missing channels m={m} must lie in [1, {n - 1}]")
    total = math.comb(n, m)
    if total <= max_enumerate:
        return list(iter_missing_scenarios(n, m)), "enumerated"
    rng = np.random.default_rng(seed)
    chosen = set()
    while len(chosen) < min(n_sampled, total):
        chosen.add(tuple(sorted(rng.choice(n, size=m, replace=False).tolist())))
    return [GateVector.missing(n, c) for c in sorted(chosen)], "sampled"


def run_missing_multi_matrix(model, test_set, m_values, registry=None, params=SsimParams(),
                             max_enumerate=64, n_sampled=64, seed=0, header=None):
    n = as_patch_list(test_set)[0].tiles.shape[0]
    for m in m_values:
        if not 2 <= m <= n - 1:
            raise ValueError(f"m={m} outside the multi-missing range [2, {n - 1}]")
    report = SsimReport(header=dict(header or {}))
    report.header.update({"scenario": "missing-multi", "seed": seed, "gate_sets": {}})
    for m in m_values:
        gates, how = scenario_gates(n, m, max_enumerate, n_sampled, seed)
        report.header["gate_sets"][str(m)] = {"mode": how, "count": len(gates),
                                              "gates": [g.to_string() for g in gates]}
        for g in gates:
            sub = evaluate_scenario(model, test_set, g, registry, params)
            for r in sub.rows:
                r["m"] = m
            report.extend(sub)
    return report


def paired_wilcoxon_by_marker(report_a, report_b, alpha=0.05):
    """Per-marker signed-rank comparison of two reports paired on (gate, patch)."""
    def _keyed(rep):
        out = {}
        for r in rep.rows:
            out.setdefault(r["marker"], {})[(r["gate"], r["patch_id"])] = r["ssim"]
        return out

    ka, kb = _keyed(report_a), _keyed(report_b)
    results = []
    for marker in ka:
        if marker not in kb:
            continue
        keys = sorted(set(ka[marker]) & set(kb[marker]))
        a = [ka[marker][k] for k in keys]
        b = [kb[marker][k] for k in keys]
        row = {"marker": marker, "n_pairs": len(keys),
               "mean_a": float(np.mean(a)) if a else math.nan,
               "mean_b": float(np.mean(b)) if b else math.nan}
        try:
            res = wilcoxon_signed_rank(a, b)
            row.update(res.to_dict())
            row["significant"] = res.pvalue < alpha
        except ValueError as exc:
            row.update({"error": str(exc), "significant": False})
        results.append(row)
    return results
