"""Sparsification, noise injection, normalization and photometric augmentation.

All functions are pure: the output depends only on the arguments and the
seed, and inputs are never modified in place.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..sparse import MaskedFeature
from ..tensor import Tensor
from .sample import Sample

STD_FLOOR = 1e-6


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)


def sparsify(dense, gt_mask, pattern: str = "uniform", density: float = 0.05,
             seed: int = 0, jitter: int = 1) -> MaskedFeature:
    """Keep a random subset of the gt-valid pixels of ``dense``.

    ``uniform`` keeps each valid pixel with probability ``density``.
    ``scanlines`` keeps every ``k``-th row (``k = round(1 / density)``, random
    phase) and then moves each column's sample up or down by at most
    ``jitter`` rows, mimicking the bent rows of a laser scanner.
    Dropped pixels get value 0 and mask 0.
    """
    if not 0 < density <= 1:
        raise ValueError(f"density must be in (0, 1], got {density}")
    values = _array(dense)
    valid = _array(gt_mask) > 0
    _, h, w = values.shape
    rng = np.random.default_rng(seed)
    if pattern == "uniform":
        keep = rng.random((1, h, w)) < density
    elif pattern == "scanlines":
        k = max(1, int(round(1 / density)))
        rows = np.arange(int(rng.integers(k)), h, k)
        keep = np.zeros((1, h, w), dtype=bool)
        if jitter > 0:
            shift = rng.integers(-jitter, jitter + 1, size=(len(rows), w))
        else:
            shift = np.zeros((len(rows), w), dtype=int)
        rr = np.clip(rows[:, None] + shift, 0, h - 1)
        keep[0, rr, np.broadcast_to(np.arange(w), rr.shape)] = True
    else:
        raise ValueError(f"unknown sparsification pattern {pattern!r}")
    mask = (keep & valid).astype(np.float32)
    return MaskedFeature(Tensor(values * mask), Tensor(mask))


def add_noise(values: MaskedFeature, kind: str = "gaussian", scale: float = 2.0,
              seed: int = 0) -> MaskedFeature:
    """Add i.i.d. noise to valid pixels; ``scale`` is sigma (gaussian) or b (laplacian)."""
    if scale < 0:
        raise ValueError(f"noise scale must be >= 0, got {scale}")
    x = values.features.data
    mask = values.mask.data
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        noise = rng.normal(0.0, scale, size=x.shape)
    elif kind == "laplacian":
        noise = rng.laplace(0.0, scale, size=x.shape)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    valid = np.broadcast_to(mask > 0, x.shape)
    out = x.copy()
    out[valid] = (x.astype(np.float64) + noise)[valid].astype(x.dtype)
    return MaskedFeature(Tensor(out), Tensor(mask.copy()))


@dataclass
class NormStats:
    image_mean: np.ndarray
    image_std: np.ndarray
    sparse_mean: np.ndarray
    sparse_std: np.ndarray


def _standardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((x - mean[:, None, None]) / std[:, None, None]).astype(np.float32)


def normalize(sample: Sample) -> tuple[Sample, NormStats]:
    """Standardize image and values per channel.

    Image statistics use all pixels; sparse statistics use valid sparse
    pixels only. The ground truth is standardized with the sparse
    statistics so the loss lives in the same space as the network input.
    Invalid pixels are set to 0.
    """
    valid = sample.sparse_mask[0] > 0
    if not valid.any():
        raise ValueError("cannot normalize a sample without valid sparse pixels")
    img = sample.image.astype(np.float64)
    im_mean = img.mean(axis=(1, 2))
    im_std = np.maximum(img.std(axis=(1, 2)), STD_FLOOR)
    vals = sample.sparse_values.astype(np.float64)[:, valid]
    sp_mean = vals.mean(axis=1)
    sp_std = np.maximum(vals.std(axis=1), STD_FLOOR)
    stats = NormStats(im_mean, im_std, sp_mean, sp_std)
    sparse = _standardize(sample.sparse_values, sp_mean, sp_std) * sample.sparse_mask
    gt = _standardize(sample.gt_values, sp_mean, sp_std) * sample.gt_mask
    out = Sample(_standardize(sample.image, im_mean, im_std), sparse.astype(np.float32),
                 sample.sparse_mask.copy(), gt.astype(np.float32), sample.gt_mask.copy(),
                 sample.task)
    return out, stats


def denormalize(values, stats: NormStats) -> np.ndarray:
    """Map standardized values back to original units."""
    x = _array(values).astype(np.float64)
    return (x * stats.sparse_std[:, None, None] + stats.sparse_mean[:, None, None]).astype(np.float32)


@dataclass(frozen=True)
class AugmentRanges:
    gamma: tuple[float, float] = (0.7, 1.5)
    brightness: tuple[float, float] = (0.8, 1.2)
    color: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 0.02

    @classmethod
    def identity(cls) -> "AugmentRanges":
        return cls((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), 0.0)


def photometric_augment(image, seed: int, ranges: AugmentRanges = AugmentRanges()) -> np.ndarray:
    """Random gamma, brightness, per-channel color scale and pixel noise, clamped to [0, 1]."""
    img = _array(image).astype(np.float64)
    rng = np.random.default_rng(seed)
    gamma = rng.uniform(*ranges.gamma)
    bright = rng.uniform(*ranges.brightness)
    color = rng.uniform(*ranges.color, size=img.shape[0])
    noise = rng.normal(0.0, ranges.noise_sigma, size=img.shape)
    out = np.clip(img, 0, 1) ** gamma * bright * color[:, None, None] + noise
    return np.clip(out, 0, 1).astype(np.float32)


def prepare_input(sample: Sample, density: float, pattern: str = "uniform",
                  noise_kind: str = "gaussian", noise_scale: float = 0.0,
                  seed: int = 0) -> Sample:
    """Sparsify the ground truth of ``sample`` and optionally add noise."""
    ss = np.random.SeedSequence(seed).spawn(2)
    sparse = sparsify(sample.gt_values, sample.gt_mask, pattern, density,
                      int(ss[0].generate_state(1)[0]))
    if noise_scale > 0:
        sparse = add_noise(sparse, noise_kind, noise_scale, int(ss[1].generate_state(1)[0]))
    return sample.with_sparse(sparse.features.data, sparse.mask.data)
