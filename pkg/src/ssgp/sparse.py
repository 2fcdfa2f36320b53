"""Sparsity-aware primitives on (features, mask) pairs.

Every op multiplies features by their mask before use, so values at
invalid pixels never reach an output. Masks are constants for backprop.

Ops accept ``sparse=False`` for the mask-free ablation: the mask is then
ignored, every window is treated as full (denominator = window size,
zero padding counts) and the output mask is all ones.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import add, col2im, conv_flops, crop, im2col, mul_const, out_size
from .tensor import ShapeError, Tensor, add_flops, make_output, note_kinks


@dataclass
class MaskedFeature:
    features: Tensor
    mask: Tensor

    def __post_init__(self):
        f, m = self.features.shape, self.mask.shape
        if len(f) != 3 or m != (1,) + f[1:]:
            raise ShapeError(f"mask shape {m} does not fit features {f}")

    @property
    def shape(self):
        return self.features.shape

    def density(self) -> float:
        return float(self.mask.data.mean())

    @classmethod
    def dense(cls, features: Tensor) -> "MaskedFeature":
        return cls(features, Tensor(np.ones((1,) + features.shape[1:], dtype=np.float32)))


def _mask_windows(m: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Count of valid pixels per window, ``[ho*wo]``; padding counts as invalid."""
    p = k // 2
    mp = np.pad(m, ((0, 0), (p, p), (p, p)))
    total = np.zeros((ho, wo), dtype=m.dtype)
    for a in range(k):
        for b in range(k):
            total += mp[0, a:a + stride * ho:stride, b:b + stride * wo:stride]
    return total.reshape(-1)


def sparse_conv_flops(cin: int, cout: int, k: int, h: int, w: int, stride: int = 1,
                      bias: bool = True, sparse: bool = True) -> int:
    ho, wo = out_size(h, stride), out_size(w, stride)
    n = conv_flops(cin, cout, k, ho, wo, bias)
    if sparse:
        # input masking, window mask count, per-output normalization
        n += cin * h * w + k * k * ho * wo + cout * ho * wo
    return n


def sparse_conv2d(inp: MaskedFeature, weight: Tensor, bias: Tensor | None = None,
                  stride: int = 1, linear: bool = False, sparse: bool = True) -> MaskedFeature:
    """Normalized sparse convolution.

    ``y = W * (x . m) / sum_window(m) + b`` where the window has support;
    elsewhere features and mask are 0.
    """
    x = inp.features
    cout, cin, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"sparse_conv2d: kernel must be 1x1 or 3x3, got {weight.shape}")
    if cin != x.shape[0]:
        raise ShapeError(f"sparse_conv2d: input has C={x.shape[0]}, weights expect C_in={cin}")
    if stride not in (1, 2):
        raise ShapeError(f"sparse_conv2d: stride must be 1 or 2, got {stride}")
    _, h, w = x.shape
    ho, wo = out_size(h, stride), out_size(w, stride)
    p = k // 2
    dt = np.result_type(x.data, weight.data)
    m = inp.mask.data.astype(dt, copy=False)
    xm = x.data.astype(dt, copy=False)
    if sparse:
        xm = xm * m
        den = _mask_windows(m, k, stride, ho, wo)
        valid = den > 0
        inv = np.where(valid, 1.0 / np.where(valid, den, 1), 0).astype(dt)
    else:
        valid = np.ones(ho * wo, dtype=bool)
        inv = np.full(ho * wo, 1.0 / (k * k), dtype=dt)
    if k == 1 and stride == 1:
        cols = xm.reshape(cin, h * w)
    else:
        cols = im2col(np.pad(xm, ((0, 0), (p, p), (p, p))), k, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1).astype(dt, copy=False)
    y = (wmat @ cols) * inv
    if bias is not None:
        y += bias.data.astype(dt, copy=False)[:, None] * valid
    if not linear:
        note_kinks(y)
        np.maximum(y, 0, out=y)
    add_flops(sparse_conv_flops(cin, cout, k, h, w, stride, bias is not None, sparse))

    def backward(g):
        g = g.reshape(cout, ho * wo)
        if not linear:
            g = g * (y > 0)
        gpre = g * inv
        gw = (gpre @ cols.T).reshape(weight.shape)
        gb = (g * valid).sum(axis=1) if bias is not None else None
        if not x.requires_grad:
            return None, gw, gb
        gcols = wmat.T @ gpre
        if k == 1 and stride == 1:
            gx = gcols.reshape(cin, h, w)
        else:
            gx = col2im(gcols, cin, h + 2 * p, w + 2 * p, k, stride, ho, wo)[:, p:p + h, p:p + w]
        if sparse:
            gx = gx * m
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    out = make_output(y.reshape(cout, ho, wo), inputs, backward)
    return MaskedFeature(out, Tensor(valid.reshape(1, ho, wo).astype(np.float32)))


def sparse_pool_flops(c: int, h: int, w: int, sparse: bool = True) -> int:
    ho, wo = out_size(h, 2), out_size(w, 2)
    n = 9 * c * ho * wo
    if sparse:
        n += c * h * w + 9 * ho * wo
    return n


def sparse_avg_pool(inp: MaskedFeature, sparse: bool = True) -> MaskedFeature:
    """3x3 stride-2 average over valid entries only (mask-0 padding)."""
    x = inp.features
    c, h, w = x.shape
    ho, wo = out_size(h, 2), out_size(w, 2)
    dt = x.data.dtype
    m = inp.mask.data.astype(dt, copy=False)
    xm = x.data * m if sparse else x.data
    xp = np.pad(xm, ((0, 0), (1, 1), (1, 1)))
    num = np.zeros((c, ho, wo), dtype=dt)
    for a in range(3):
        for b in range(3):
            num += xp[:, a:a + 2 * ho:2, b:b + 2 * wo:2]
    if sparse:
        den = _mask_windows(m, 3, 2, ho, wo).reshape(1, ho, wo)
        valid = den > 0
        inv = np.where(valid, 1.0 / np.where(valid, den, 1), 0).astype(dt)
    else:
        valid = np.ones((1, ho, wo), dtype=bool)
        inv = np.full((1, ho, wo), 1.0 / 9, dtype=dt)
    y = num * inv
    add_flops(sparse_pool_flops(c, h, w, sparse))

    def backward(g):
        gn = g * inv
        gp = np.zeros((c, h + 2, w + 2), dtype=g.dtype)
        for a in range(3):
            for b in range(3):
                gp[:, a:a + 2 * ho:2, b:b + 2 * wo:2] += gn
        gx = gp[:, 1:h + 1, 1:w + 1]
        return (gx * m if sparse else gx,)

    out = make_output(y, (x,), backward)
    return MaskedFeature(out, Tensor(valid.astype(np.float32)))


def nn_upsample(inp: MaskedFeature) -> MaskedFeature:
    """Replicate every pixel (features and mask) into a 2x2 block."""
    x = inp.features
    c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    out = make_output(y, (x,), backward, check_finite=False)
    mask = np.repeat(np.repeat(inp.mask.data, 2, axis=1), 2, axis=2)
    return MaskedFeature(out, Tensor(mask))


def crop_masked(inp: MaskedFeature, h: int, w: int) -> MaskedFeature:
    return MaskedFeature(crop(inp.features, h, w), Tensor(inp.mask.data[:, :h, :w].copy()))


def masked_sum(a: MaskedFeature, b: MaskedFeature, sparse: bool = True) -> MaskedFeature:
    """Add features where valid (invalid side contributes 0); masks OR-ed."""
    if a.shape != b.shape:
        raise ShapeError(f"masked_sum: shape mismatch {a.shape} vs {b.shape}")
    if not sparse:
        return MaskedFeature(add(a.features, b.features), a.mask)
    fa = mul_const(a.features, a.mask.data)
    fb = mul_const(b.features, b.mask.data)
    mask = np.maximum(a.mask.data, b.mask.data)
    return MaskedFeature(add(fa, fb), Tensor(mask))


def sparse_skip_merge(decoder: MaskedFeature, encoder: MaskedFeature, weight: Tensor,
                      bias: Tensor | None = None, sparse: bool = True) -> MaskedFeature:
    """Masked sum of decoder and encoder features merged by a sparse 3x3 conv."""
    return sparse_conv2d(masked_sum(decoder, encoder, sparse), weight, bias,
                         stride=1, sparse=sparse)
