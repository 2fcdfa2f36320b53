"""Image-guided spatially-variant propagation.

The affinity blocks turn image features into one ``K x K`` kernel per pixel
(center weight fixed to 1). :func:`propagate` applies those kernels
depthwise to a masked feature map and normalizes by the number of valid
pixels in each window, so isolated valid pixels pass through unchanged and
information only spreads from valid pixels into gaps. A sparse 1x1
convolution then mixes channels (:func:`ssgp_propagate`).

For dense refinement the kernels are stabilized into convex weights and
applied repeatedly to an already dense map (:func:`cspn_refine`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ops import concat_channels, conv2d
from .sparse import MaskedFeature, sparse_conv2d
from .tensor import ShapeError, Tensor, add_flops, make_output, note_kinks


@dataclass
class AffinityField:
    """Off-center kernel weights, ``[n * (K*K - 1), H, W]`` in row-major window
    order with the center omitted (its weight is implicitly 1).

    ``n`` is 1 for a flat affinity shared by all channels, or the channel
    count for a full per-channel volume.
    """

    kernels: Tensor
    size: int = 3

    def __post_init__(self):
        k = self.size
        if k < 3 or k % 2 == 0:
            raise ShapeError(f"kernel size must be odd and >= 3, got {k}")
        if self.kernels.shape[0] % (k * k - 1):
            raise ShapeError(
                f"affinity has {self.kernels.shape[0]} channels, not a multiple of {k * k - 1}")

    @property
    def groups(self) -> int:
        return self.kernels.shape[0] // (self.size ** 2 - 1)


@dataclass
class StabilizedAffinity:
    """Full ``K*K`` refinement weights per pixel, ``[n, K*K, H, W]``."""

    weights: Tensor
    size: int = 3

    @property
    def off_center(self) -> np.ndarray:
        c = self.size ** 2 // 2
        return np.delete(self.weights.data, c, axis=1)

    @property
    def center(self) -> np.ndarray:
        return self.weights.data[:, self.size ** 2 // 2]


def predict_affinity(features: Tensor, pre_weight: Tensor, pre_bias: Tensor,
                     head_weight: Tensor, head_bias: Tensor, size: int = 3) -> AffinityField:
    """3x3 ReLU pre-transform followed by a linear 3x3 head."""
    hidden = conv2d(features, pre_weight, pre_bias)
    return AffinityField(conv2d(hidden, head_weight, head_bias, linear=True), size)


def _offsets(k: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(k) for b in range(k)]


def _full_kernels(off: np.ndarray, k: int) -> np.ndarray:
    """Insert the fixed unit center: ``[g, K*K-1, H, W] -> [g, K*K, H, W]``."""
    g, _, h, w = off.shape
    c = k * k // 2
    full = np.empty((g, k * k, h, w), dtype=off.dtype)
    full[:, :c] = off[:, :c]
    full[:, c] = 1
    full[:, c + 1:] = off[:, c:]
    return full


def propagation_flops(c: int, h: int, w: int, k: int = 3, sparse: bool = True) -> int:
    n = 2 * k * k * c * h * w
    if sparse:
        n += c * h * w + k * k * h * w + c * h * w
    return n


def propagate(inp: MaskedFeature, affinity: AffinityField, sparse: bool = True) -> MaskedFeature:
    """Depthwise spatially-variant convolution normalized by window mask count.

    For channel ``c`` at pixel ``p`` with window ``W(p)``::

        out[c, p] = sum_{q in W(p)} x[c, q] m[q] K_p[q - p] / sum_{q in W(p)} m[q]

    A flat affinity (one group) shares ``K_p`` across channels; a full affinity
    carries one group per channel. Output mask is 1 where the window held any
    valid pixel.
    """
    x = inp.features
    c, h, w = x.shape
    k = affinity.size
    kk = k * k
    kt = affinity.kernels
    if kt.shape[1:] != (h, w):
        raise ShapeError(f"affinity spatial size {kt.shape[1:]} != features {(h, w)}")
    groups = affinity.groups
    if groups not in (1, c):
        raise ShapeError(f"affinity has {groups} kernel groups for {c} feature channels")
    r = k // 2
    dt = np.result_type(x.data, kt.data)
    off = kt.data.astype(dt, copy=False).reshape(groups, kk - 1, h, w)
    kern = _full_kernels(off, k)
    m = inp.mask.data.astype(dt, copy=False)
    xm = x.data.astype(dt, copy=False)
    if sparse:
        xm = xm * m
    xp = np.pad(xm, ((0, 0), (r, r), (r, r)))
    shifts = _offsets(k)
    acc = np.zeros((c, h, w), dtype=dt)
    for n, (a, b) in enumerate(shifts):
        acc += xp[:, a:a + h, b:b + w] * kern[:, n]
    if sparse:
        mp = np.pad(m, ((0, 0), (r, r), (r, r)))
        den = np.zeros((1, h, w), dtype=dt)
        for a, b in shifts:
            den += mp[:, a:a + h, b:b + w]
        valid = den > 0
        inv = np.where(valid, 1.0 / np.where(valid, den, 1), 0).astype(dt)
    else:
        valid = np.ones((1, h, w), dtype=bool)
        inv = np.full((1, h, w), 1.0 / kk, dtype=dt)
    y = acc * inv
    add_flops(propagation_flops(c, h, w, k, sparse))

    def backward(g):
        ga = g * inv
        gxp = np.zeros((c, h + 2 * r, w + 2 * r), dtype=ga.dtype)
        gk = np.empty((groups, kk, h, w), dtype=ga.dtype)
        for n, (a, b) in enumerate(shifts):
            gxp[:, a:a + h, b:b + w] += ga * kern[:, n]
            prod = ga * xp[:, a:a + h, b:b + w]
            gk[:, n] = prod.sum(axis=0) if groups == 1 else prod
        gx = gxp[:, r:r + h, r:r + w]
        if sparse:
            gx = gx * m
        gk = np.delete(gk, kk // 2, axis=1).reshape(kt.shape)
        return gx, gk

    out = make_output(y, (x, kt), backward)
    return MaskedFeature(out, Tensor(valid.astype(np.float32)))


def ssgp_propagate(inp: MaskedFeature, affinity: AffinityField, mix_weight: Tensor,
                   mix_bias: Tensor | None = None, sparse: bool = True) -> MaskedFeature:
    """Flat-affinity guided propagation followed by a sparse 1x1 channel mix (ReLU)."""
    if affinity.groups != 1:
        raise ShapeError(f"flat propagation needs one kernel group, got {affinity.groups}")
    stage1 = propagate(inp, affinity, sparse)
    return sparse_conv2d(stage1, mix_weight, mix_bias, sparse=sparse)


def ssgp_propagate_full(inp: MaskedFeature, affinity: AffinityField | Sequence[AffinityField],
                        mix_weight: Tensor, mix_bias: Tensor | None = None,
                        sparse: bool = True) -> MaskedFeature:
    """Like :func:`ssgp_propagate` but channel ``c`` uses its own kernels.

    ``affinity`` is either one field per channel or a single field holding
    all channel groups stacked.
    """
    c = inp.shape[0]
    if not isinstance(affinity, AffinityField):
        fields = list(affinity)
        if len(fields) != c:
            raise ShapeError(f"got {len(fields)} affinity fields for {c} channels")
        affinity = AffinityField(concat_channels([f.kernels for f in fields]), fields[0].size)
    if affinity.groups != c:
        raise ShapeError(f"full propagation needs {c} kernel groups, got {affinity.groups}")
    stage1 = propagate(inp, affinity, sparse)
    return sparse_conv2d(stage1, mix_weight, mix_bias, sparse=sparse)


def stability_flops(groups: int, h: int, w: int, k: int = 3) -> int:
    # abs, running sum and division per raw weight, one reciprocal per pixel
    return 3 * groups * (k * k - 1) * h * w + groups * h * w


def stability_transform(raw: AffinityField) -> StabilizedAffinity:
    """Map raw refinement affinities to convex per-pixel weights.

    With ``w_i = |a_i|`` and ``s = 1 + sum_i w_i``, off-center weights are
    ``w_i / s`` and the center is ``1 / s = 1 - sum_i w_i / s``. Weights are
    non-negative and sum to one, so filtering is a convex combination of the
    window: zero raw affinities give the identity, constants are preserved
    and the result never exceeds the input range.
    """
    k = raw.size
    kk = k * k
    t = raw.kernels
    _, h, w = t.shape
    a = t.data.reshape(raw.groups, kk - 1, h, w)
    wabs = np.abs(a)
    note_kinks(a)
    s = 1 + wabs.sum(axis=1, keepdims=True)
    full = _full_kernels(wabs / s, k)
    full[:, kk // 2] = 1 / s[:, 0]
    add_flops(stability_flops(raw.groups, h, w, k))

    def backward(g):
        g_off = np.delete(g, kk // 2, axis=1)
        g_c = g[:, kk // 2:kk // 2 + 1]
        dw = g_off / s - (g_off * wabs).sum(axis=1, keepdims=True) / s ** 2 - g_c / s ** 2
        return ((np.sign(a) * dw).reshape(t.shape),)

    return StabilizedAffinity(make_output(full, (t,), backward), k)


def spatial_filter(x: Tensor, stab: StabilizedAffinity) -> Tensor:
    """One refinement step: per-pixel ``K x K`` weighted sum, replicate padding."""
    c, h, w = x.shape
    wt = stab.weights
    k = stab.size
    r = k // 2
    if wt.shape[0] != c or wt.shape[2:] != (h, w):
        raise ShapeError(f"refinement weights {wt.shape} do not fit input {x.shape}")
    dt = np.result_type(x.data, wt.data)
    xp = np.pad(x.data.astype(dt, copy=False), ((0, 0), (r, r), (r, r)), mode="edge")
    wd = wt.data.astype(dt, copy=False)
    shifts = _offsets(k)
    y = np.zeros((c, h, w), dtype=dt)
    for n, (a, b) in enumerate(shifts):
        y += wd[:, n] * xp[:, a:a + h, b:b + w]
    add_flops(2 * k * k * c * h * w)

    def backward(g):
        gw = np.empty(wd.shape, dtype=g.dtype)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for n, (a, b) in enumerate(shifts):
            gw[:, n] = g * xp[:, a:a + h, b:b + w]
            gxp[:, a:a + h, b:b + w] += g * wd[:, n]
        # fold the replicated border back onto the edge pixels
        gxp[:, r] += gxp[:, :r].sum(axis=1)
        gxp[:, r + h - 1] += gxp[:, r + h:].sum(axis=1)
        gxp[:, :, r] += gxp[:, :, :r].sum(axis=2)
        gxp[:, :, r + w - 1] += gxp[:, :, r + w:].sum(axis=2)
        return gxp[:, r:r + h, r:r + w], gw

    return make_output(y, (x, wt), backward)


def cspn_refine(dense: Tensor, features: Tensor, head_weight: Tensor, head_bias: Tensor,
                iterations: int = 10, size: int = 3) -> Tensor:
    """Refine a dense map with ``iterations`` stabilized propagation steps.

    A single 3x3 head maps the image features to ``C * (K*K - 1)`` raw
    affinities, one kernel group per output channel.
    """
    c = dense.shape[0]
    expected = c * (size * size - 1)
    if head_weight.shape[0] != expected:
        raise ShapeError(f"refinement head emits {head_weight.shape[0]} channels, need {expected}")
    if iterations == 0:
        return dense
    raw = AffinityField(conv2d(features, head_weight, head_bias, linear=True), size)
    stab = stability_transform(raw)
    x = dense
    for _ in range(iterations):
        x = spatial_filter(x, stab)
    return x
