"""Metrics, evaluation reports and robustness sweeps.

All metrics take ``[C, H, W]`` arrays in original (denormalized) units and
a ``[1, H, W]`` validity mask, and accumulate in float64.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data.formats import write_error_map
from .data.sample import Sample
from .data.transforms import add_noise, denormalize, normalize, sparsify
from .network import Model
from .sparse import MaskedFeature
from .tensor import Tensor

KOE_PIXELS = 3.0
KOE_RELATIVE = 0.05
# scene flow channel layout: d0, d1, u, v
SCENE_FLOW_GROUPS = {"d0": [0], "d1": [1], "of": [2, 3], "sf": [0, 1, 2, 3]}


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _valid(pred, gt, gt_mask):
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and gt {g.shape} differ in shape")
    m = _arr(gt_mask)
    m = (m[0] if m.ndim == 3 else m) > 0
    if not m.any():
        raise ValueError("metric over an empty gt mask")
    return p, g, m


def endpoint_errors(pred, gt) -> np.ndarray:
    """Per-pixel Euclidean norm of the residual vector, ``[H, W]``."""
    return np.sqrt(((_arr(pred) - _arr(gt)) ** 2).sum(axis=0))


def metric_epe(pred, gt, gt_mask) -> float:
    p, g, m = _valid(pred, gt, gt_mask)
    return float(endpoint_errors(p, g)[m].mean())


def metric_mae(pred, gt, gt_mask) -> float:
    p, g, m = _valid(pred, gt, gt_mask)
    return float(np.abs(p - g)[:, m].mean())


def metric_rmse(pred, gt, gt_mask) -> float:
    p, g, m = _valid(pred, gt, gt_mask)
    return float(np.sqrt(((p - g) ** 2)[:, m].mean()))


def outlier_map(pred, gt) -> np.ndarray:
    """True where the error exceeds 3 px and 5% of the gt vector norm."""
    err = endpoint_errors(pred, gt)
    return (err > KOE_PIXELS) & (err > KOE_RELATIVE * np.sqrt((_arr(gt) ** 2).sum(axis=0)))


def metric_koe(pred, gt, gt_mask, channels: Sequence[int] | None = None) -> float:
    """Percentage of valid pixels that are outliers; ``channels`` selects a group."""
    p, g, m = _valid(pred, gt, gt_mask)
    if channels is not None:
        p, g = p[list(channels)], g[list(channels)]
    return float(100.0 * outlier_map(p, g)[m].mean())


@dataclass
class OrrResult:
    value: float
    outliers: int
    corrected: int
    vacuous: bool


def _orr_counts(sparse_input: MaskedFeature, pred, gt, gt_mask) -> tuple[int, int]:
    p, g, m = _valid(pred, gt, gt_mask)
    inp = _arr(sparse_input.features)
    support = (_arr(sparse_input.mask)[0] > 0) & m
    if not support.any():
        raise ValueError("sparse input and gt support do not intersect")
    bad_in = outlier_map(inp, g) & support
    fixed = bad_in & ~outlier_map(p, g)
    return int(bad_in.sum()), int(fixed.sum())


def _orr(outliers: int, corrected: int) -> OrrResult:
    if outliers == 0:
        return OrrResult(100.0, 0, 0, True)
    return OrrResult(100.0 * corrected / outliers, outliers, corrected, False)


def metric_orr(sparse_input: MaskedFeature, pred, gt, gt_mask) -> OrrResult:
    """Share of outlier input pixels whose prediction is an inlier.

    Vacuously 100% (flagged) when the input holds no outliers.
    """
    return _orr(*_orr_counts(sparse_input, pred, gt, gt_mask))


def boundary_band(h: int, w: int, margin: int = 10) -> np.ndarray:
    if h <= 2 * margin or w <= 2 * margin:
        raise ValueError(f"image {h}x{w} too small for a {margin} px border band")
    band = np.ones((h, w), dtype=bool)
    band[margin:h - margin, margin:w - margin] = False
    return band


def metric_boundary(pred, gt, gt_mask, margin: int = 10) -> tuple[float, float]:
    """(MAE, RMSE) restricted to pixels within ``margin`` of the image border."""
    p, g, m = _valid(pred, gt, gt_mask)
    band = boundary_band(p.shape[1], p.shape[2], margin) & m
    if not band.any():
        raise ValueError("no valid pixels in the border band")
    r = (p - g)[:, band]
    return float(np.abs(r).mean()), float(np.sqrt((r ** 2).mean()))


# -- model evaluation -----------------------------------------------------

def predict(model: Model, sample: Sample) -> np.ndarray:
    """Dense prediction for ``sample`` in original units."""
    norm, stats = normalize(sample)
    out = model(Tensor(norm.image),
                MaskedFeature(Tensor(norm.sparse_values), Tensor(norm.sparse_mask)))
    return denormalize(out.dense, stats)


def nearest_fill(sample: Sample) -> np.ndarray:
    """Baseline: every pixel copies its nearest valid sparse pixel."""
    invalid = sample.sparse_mask[0] <= 0
    if invalid.all():
        raise ValueError("nearest fill needs at least one valid pixel")
    _, (iy, ix) = ndimage.distance_transform_edt(invalid, return_indices=True)
    return sample.sparse_values[:, iy, ix].astype(np.float32)


def fingerprint(model: Model) -> str:
    h = hashlib.sha256()
    for p in model.params:
        h.update((p.name or "").encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class MetricsReport:
    values: dict[str, float] = field(default_factory=dict)
    units: dict[str, str] = field(default_factory=dict)
    samples: int = 0
    config_hash: str = ""
    orr_vacuous: bool = False

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["metric", "value", "unit", "samples", "config_hash"])
            for name, value in self.values.items():
                w.writerow([name, repr(value), self.units[name], self.samples, self.config_hash])


def _sample_metrics(pred, sample: Sample, margin: int) -> dict[str, tuple[float, str]]:
    gt, m = sample.gt_values, sample.gt_mask
    motion = sample.task != "depth"
    unit = "px" if motion else "units"
    out = {}
    if motion:
        out["epe"] = (metric_epe(pred, gt, m), "px")
    out["koe"] = (metric_koe(pred, gt, m), "%")
    if sample.task == "scene_flow":
        for name, chans in SCENE_FLOW_GROUPS.items():
            out[f"koe_{name}"] = (metric_koe(pred, gt, m, chans), "%")
    out["mae"] = (metric_mae(pred, gt, m), unit)
    out["rmse"] = (metric_rmse(pred, gt, m), unit)
    h, w = gt.shape[1:]
    if h > 2 * margin and w > 2 * margin:
        bm, br = metric_boundary(pred, gt, m, margin)
        out["boundary_mae"] = (bm, unit)
        out["boundary_rmse"] = (br, unit)
    return out


def evaluate_predictions(preds: Sequence[np.ndarray], samples: Sequence[Sample],
                         cfg_hash: str = "", margin: int = 10, error_dir=None) -> MetricsReport:
    """Average per-sample metrics in sample order; ORR pools counts over samples."""
    if len(preds) != len(samples) or not samples:
        raise ValueError("need one prediction per sample and at least one sample")
    sums: dict[str, float] = {}
    units: dict[str, str] = {}
    outliers = corrected = 0
    for i, (pred, s) in enumerate(zip(preds, samples)):
        for name, (value, unit) in _sample_metrics(pred, s, margin).items():
            sums[name] = sums.get(name, 0.0) + value
            units[name] = unit
        sp = MaskedFeature(Tensor(s.sparse_values), Tensor(s.sparse_mask))
        o, c = _orr_counts(sp, pred, s.gt_values, s.gt_mask)
        outliers += o
        corrected += c
        if error_dir is not None:
            Path(error_dir).mkdir(parents=True, exist_ok=True)
            err = endpoint_errors(pred, s.gt_values) * (s.gt_mask[0] > 0)
            write_error_map(Path(error_dir) / f"{i:05d}.error.pgm", err)
    n = len(samples)
    values = {k: v / n for k, v in sums.items()}
    orr = _orr(outliers, corrected)
    values["orr"] = orr.value
    units["orr"] = "%"
    return MetricsReport(values, units, n, cfg_hash, orr.vacuous)


def evaluate(model: Model, samples: Sequence[Sample], cfg_hash: str = "", margin: int = 10,
             error_dir=None) -> MetricsReport:
    return evaluate_predictions([predict(model, s) for s in samples], samples, cfg_hash,
                                margin, error_dir)


# -- sweeps ---------------------------------------------------------------

@dataclass
class SweepRow:
    kind: str
    level: float
    metric: str
    relative_value: float
    absolute_value: float


def default_metric(task: str) -> str:
    return "mae" if task == "depth" else "epe"


def _score(model: Model, samples: Sequence[Sample], metric: str) -> float:
    total = 0.0
    for s in samples:
        pred = predict(model, s)
        if metric == "koe":
            total += metric_koe(pred, s.gt_values, s.gt_mask)
        elif metric == "epe":
            total += metric_epe(pred, s.gt_values, s.gt_mask)
        elif metric == "mae":
            total += metric_mae(pred, s.gt_values, s.gt_mask)
        elif metric == "rmse":
            total += metric_rmse(pred, s.gt_values, s.gt_mask)
        else:
            raise ValueError(f"unknown sweep metric {metric!r}")
    return total / len(samples)


def _relative(value: float, base: float) -> float:
    if base == 0:
        return 1.0 if value == 0 else float("inf")
    return value / base


def _cell_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def sweep_noise(model: Model, samples: Sequence[Sample], kinds: Sequence[str] = ("gaussian", "laplacian"),
                levels: Sequence[float] = (0, 1, 2, 3, 4, 5), metric: str = "koe",
                seed: int = 0) -> list[SweepRow]:
    """Add noise of each kind and level to the sparse inputs and score the model.

    Sample ``i`` uses the same noise seed in every cell, so only the kind and
    level change between cells. Relative values divide by the level-0 score.
    """
    if not samples:
        raise ValueError("sweep needs at least one sample")
    rows = []
    for kind in kinds:
        scores = []
        for level in levels:
            noisy = []
            for i, s in enumerate(samples):
                mf = MaskedFeature(Tensor(s.sparse_values), Tensor(s.sparse_mask))
                mf = add_noise(mf, kind, float(level), _cell_seed(seed, i))
                noisy.append(s.with_sparse(mf.features.data, mf.mask.data))
            scores.append(_score(model, noisy, metric))
        base = scores[list(levels).index(0)] if 0 in levels else _score(model, samples, metric)
        rows += [SweepRow(kind, float(lv), metric, _relative(v, base), v)
                 for lv, v in zip(levels, scores)]
    return rows


def sweep_density(model: Model, samples: Sequence[Sample],
                  densities: Sequence[float] = (1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01),
                  metric: str | None = None, seed: int = 0) -> list[SweepRow]:
    """Uniformly re-sparsify the ground truth at each density and score the model.

    Relative values divide by the density-1.0 score.
    """
    if not samples:
        raise ValueError("sweep needs at least one sample")
    metric = metric or default_metric(samples[0].task)
    scores = []
    for d in densities:
        cell = []
        for i, s in enumerate(samples):
            mf = sparsify(s.gt_values, s.gt_mask, "uniform", float(d), _cell_seed(seed, i))
            cell.append(s.with_sparse(mf.features.data, mf.mask.data))
        scores.append(_score(model, cell, metric))
    if 1.0 in densities:
        base = scores[list(densities).index(1.0)]
    else:
        full = [s.with_sparse(s.gt_values * s.gt_mask, s.gt_mask) for s in samples]
        base = _score(model, full, metric)
    return [SweepRow("uniform", float(d), metric, _relative(v, base), v)
            for d, v in zip(densities, scores)]


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["kind", "level", "metric", "relative_value", "absolute_value"])
        for r in rows:
            w.writerow([r.kind, repr(r.level), r.metric, repr(r.relative_value), repr(r.absolute_value)])
