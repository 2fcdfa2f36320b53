"""Procedural scenes: textured convex polygons over a textured background.

Every region carries its own affine target field, so ground-truth
discontinuities coincide exactly with the rendered region boundaries.
"""
from __future__ import annotations

import numpy as np

from .sample import TASK_CHANNELS, Sample, canonical_task


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros((h, w))
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.05, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        tex += 0.05 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return tex + rng.normal(0, 0.015, size=(h, w))


def _polygon(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Vertices of a random convex polygon, counter-clockwise in (x, y)."""
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    size = min(h, w)
    ax, ay = rng.uniform(0.12, 0.35, size=2) * size
    rot = rng.uniform(0, 2 * np.pi)
    n = int(rng.integers(3, 8))
    ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    px, py = ax * np.cos(ang), ay * np.sin(ang)
    return np.stack([cx + np.cos(rot) * px - np.sin(rot) * py,
                     cy + np.sin(rot) * px + np.cos(rot) * py], axis=1)


def _inside(poly: np.ndarray, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    inside = np.ones(xx.shape, dtype=bool)
    for i in range(len(poly)):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % len(poly)]
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside


def _affine(rng, xx, yy, cx, cy, offset_range, slope=0.05):
    t = rng.uniform(*offset_range)
    gx, gy = rng.uniform(-slope, slope, size=2)
    return t + gx * (xx - cx) + gy * (yy - cy)


def _region_field(rng, task, xx, yy, cx, cy, background: bool) -> np.ndarray:
    if task == "optical_flow":
        r = (-4, 4) if background else (-8, 8)
        return np.stack([_affine(rng, xx, yy, cx, cy, r), _affine(rng, xx, yy, cx, cy, r)])
    if task == "scene_flow":
        d0 = _affine(rng, xx, yy, cx, cy, (2, 10) if background else (10, 40))
        d1 = d0 + _affine(rng, xx, yy, cx, cy, (-3, 3), slope=0.02)
        r = (-4, 4) if background else (-8, 8)
        return np.stack([d0, d1, _affine(rng, xx, yy, cx, cy, r), _affine(rng, xx, yy, cx, cy, r)])
    # depth: inverse depth of a plane is affine in image coordinates; the slope
    # is bounded relative to the offset so the field stays above 0.2 * offset
    t = rng.uniform(*((5, 15) if background else (15, 60)))
    span = max(xx.shape)
    gx, gy = rng.uniform(-0.4, 0.4, size=2) * t / span
    return (t + gx * (xx - cx) + gy * (yy - cy))[None]


def synth_scene(seed: int, height: int, width: int, task: str = "optical_flow",
                object_count_range: tuple[int, int] = (2, 6), return_labels: bool = False):
    """Render one scene with dense ground truth and a full mask.

    The sparse fields of the returned sample are a copy of the ground truth;
    use :func:`ssgp.data.transforms.sparsify` to thin them out.
    """
    task = canonical_task(task)
    if height < 32 or width < 32:
        raise ValueError(f"scene must be at least 32x32, got {height}x{width}")
    rng = np.random.default_rng(seed)
    h, w = height, width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    base = rng.uniform(0.2, 0.8, size=3)
    grad = rng.uniform(-0.15, 0.15, size=(3, 2))
    image = np.empty((3, h, w))
    tex = _texture(rng, h, w)
    for c in range(3):
        image[c] = base[c] + grad[c, 0] * (xx / w - 0.5) + grad[c, 1] * (yy / h - 0.5) + tex
    labels = np.zeros((h, w), dtype=np.int32)
    gt = _region_field(rng, task, xx, yy, w / 2, h / 2, background=True)

    lo, hi = object_count_range
    for obj in range(1, int(rng.integers(lo, hi + 1)) + 1):
        poly = _polygon(rng, h, w)
        region = _inside(poly, xx + 0.5, yy + 0.5)
        color = rng.uniform(0.05, 0.95, size=3)
        for _ in range(8):
            if np.abs(color - base).sum() > 0.45:
                break
            color = rng.uniform(0.05, 0.95, size=3)
        tex = _texture(rng, h, w)
        cx, cy = poly.mean(axis=0)
        field = _region_field(rng, task, xx, yy, cx, cy, background=False)
        if not region.any():
            continue
        for c in range(3):
            image[c][region] = (color[c] + tex)[region]
        gt[:, region] = field[:, region]
        labels[region] = obj

    image = np.clip(image, 0, 1).astype(np.float32)
    gt = gt.astype(np.float32)
    full = np.ones((1, h, w), dtype=np.float32)
    sample = Sample(image, gt.copy(), full.copy(), gt, full, task)
    assert gt.shape[0] == TASK_CHANNELS[task]
    return (sample, labels) if return_labels else sample
